"""Synthetic multi-epoch measurement corpus with ground-truth states."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classic_estimation import dc_estimate
from .contingency import compute_lodf, count_contingencies
from .errors import DivergenceError
from .grid_model import GridCase, build_matrices, case_from_dict
from .powerflow import StateVector, dc_line_flows, h_measure, solve_ac_power_flow

logger = logging.getLogger(__name__)

# zone letter -> bus id for the 14-bus fixture (11 load buses)
DEFAULT_ZONE_BUSES = {
    "A": 2, "B": 3, "C": 4, "D": 5, "E": 6, "F": 9,
    "G": 10, "H": 11, "I": 12, "J": 13, "K": 14,
}


@dataclass(frozen=True)
class ProfileConfig:
    epochs: int = 9030
    seed: int = 0
    zones: int = 11
    interval_min: float = 5.0
    diurnal_amplitude: float = 0.3
    weekly_amplitude: float = 0.05
    ar_coef: float = 0.9
    ar_std: float = 0.03
    phase_jitter_h: float = 1.0
    min_level: float = 0.05


@dataclass(frozen=True)
class LoadProfile:
    """Per-zone load multipliers (around 1.0) sampled every ``interval_min`` minutes."""

    levels: np.ndarray  # (epochs, zones)
    zone_names: tuple[str, ...]
    interval_min: float

    @property
    def epochs(self) -> int:
        return self.levels.shape[0]

    @property
    def duration_days(self) -> float:
        return self.epochs * self.interval_min / 1440.0

    def p_mw(self, base_mw) -> np.ndarray:
        return self.levels * np.asarray(base_mw, dtype=float)


def generate_profiles(cfg: ProfileConfig = ProfileConfig()) -> LoadProfile:
    """Diurnal sinusoid with weekly modulation and AR(1) noise, one series per zone."""
    if cfg.epochs < 64:
        raise ValueError("need at least 64 epochs")
    rng = np.random.default_rng(cfg.seed)
    minutes = np.arange(cfg.epochs) * cfg.interval_min
    day = minutes / 1440.0
    week = minutes / (7 * 1440.0)
    # daily peak near 17:00, each zone shifted a little
    phase = (17.0 + rng.uniform(-cfg.phase_jitter_h, cfg.phase_jitter_h, cfg.zones)) / 24.0
    amp = cfg.diurnal_amplitude * rng.uniform(0.8, 1.2, cfg.zones)
    diurnal = amp * np.cos(2 * np.pi * (day[:, None] - phase[None, :]))
    weekly = cfg.weekly_amplitude * np.cos(2 * np.pi * week)[:, None]
    shocks = rng.normal(0.0, cfg.ar_std * math.sqrt(1 - cfg.ar_coef ** 2), (cfg.epochs, cfg.zones))
    noise = np.empty_like(shocks)
    noise[0] = rng.normal(0.0, cfg.ar_std, cfg.zones)
    for t in range(1, cfg.epochs):
        noise[t] = cfg.ar_coef * noise[t - 1] + shocks[t]
    levels = np.maximum((1.0 + diurnal + weekly) * (1.0 + noise), cfg.min_level)
    names = tuple(chr(ord("A") + k) for k in range(cfg.zones))
    return LoadProfile(levels=levels, zone_names=names, interval_min=cfg.interval_min)


@dataclass(frozen=True)
class EpochRecord:
    t: int
    x_true: StateVector
    z_clean: np.ndarray
    z: np.ndarray
    theta_dc: np.ndarray
    n1_true: int
    n2_true: int


@dataclass
class Corpus:
    """Columnar corpus; indexing yields :class:`EpochRecord`."""

    case: GridCase
    epoch: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    z: np.ndarray
    theta_dc: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    config: dict = field(default_factory=dict)
    dropped: tuple[int, ...] = ()

    def __len__(self):
        return len(self.epoch)

    @property
    def z_clean(self) -> np.ndarray:
        return h_measure(self.case, (self.theta, self.v))

    @property
    def n_bus(self) -> int:
        return self.case.n_bus

    def __getitem__(self, k):
        if isinstance(k, slice):
            return self.subset(np.arange(len(self))[k])
        return EpochRecord(
            t=int(self.epoch[k]),
            x_true=StateVector(self.theta[k], self.v[k]),
            z_clean=h_measure(self.case, (self.theta[k], self.v[k])),
            z=self.z[k],
            theta_dc=self.theta_dc[k],
            n1_true=int(self.n1[k]),
            n2_true=int(self.n2[k]),
        )

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus(
            case=self.case, epoch=self.epoch[idx], theta=self.theta[idx], v=self.v[idx],
            z=self.z[idx], theta_dc=self.theta_dc[idx], n1=self.n1[idx], n2=self.n2[idx],
            config=self.config, dropped=self.dropped,
        )


def zone_mapping(case: GridCase, mapping: dict | None = None) -> np.ndarray:
    """Bus position for each zone, in zone order."""
    mapping = mapping or DEFAULT_ZONE_BUSES
    pos = {int(b): i for i, b in enumerate(case.bus_ids)}
    try:
        return np.array([pos[int(mapping[z])] for z in sorted(mapping)])
    except KeyError as exc:
        raise ValueError(f"zone mapping refers to unknown bus {exc}") from exc


def build_corpus(
    case: GridCase,
    profile: LoadProfile,
    *,
    noise_sigma: float = 0.01,
    power_factor: float = 0.8,
    seed: int = 0,
    mapping: dict | None = None,
    count_islanding: bool = True,
) -> Corpus:
    buses = zone_mapping(case, mapping)
    if len(buses) != profile.levels.shape[1]:
        raise ValueError("zone mapping does not match the profile's zone count")
    load_buses = np.flatnonzero(case.p_load > 0)
    if not set(load_buses) <= set(buses):
        raise ValueError("zone mapping leaves load buses uncovered")
    q_ratio = math.tan(math.acos(power_factor))
    bundle = build_matrices(case)
    n = case.n_bus
    E = profile.epochs
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sigma, (E, 2 * n)) if noise_sigma > 0 else np.zeros((E, 2 * n))

    keep, thetas, vs, zs = [], [], [], []
    dropped = []
    for t in range(E):
        p_load = np.zeros(n)
        p_load[buses] = case.p_load[buses] * profile.levels[t]
        q_load = p_load * q_ratio
        try:
            x = solve_ac_power_flow(case, p_load, q_load)
        except DivergenceError as exc:
            logger.warning("epoch %d dropped: %s", t, exc)
            dropped.append(t)
            continue
        keep.append(t)
        thetas.append(x.theta)
        vs.append(x.v)
        zs.append(h_measure(case, x) + noise[t])
    if dropped:
        logger.warning("%d of %d epochs dropped (power flow divergence)", len(dropped), E)
    theta = np.array(thetas)
    v = np.array(vs)
    z = np.array(zs)
    theta_dc = dc_estimate(bundle, z[:, :n])
    flows = dc_line_flows(bundle, theta)
    n1, n2 = count_contingencies(bundle, flows, case.f_limit, table=compute_lodf(bundle),
                                 count_islanding=count_islanding)
    config = {
        "noise_sigma": noise_sigma,
        "power_factor": power_factor,
        "seed": seed,
        "epochs": E,
        "interval_min": profile.interval_min,
        "mapping": {k: int(v) for k, v in (mapping or DEFAULT_ZONE_BUSES).items()},
        "count_islanding": count_islanding,
    }
    return Corpus(case=case, epoch=np.array(keep), theta=theta, v=v, z=z, theta_dc=theta_dc,
                  n1=np.asarray(n1), n2=np.asarray(n2), config=config, dropped=tuple(dropped))


def _split_sizes(total, fractions):
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n_train = int(math.floor(fractions[0] * total + 1e-9))
    n_val = int(math.floor(fractions[1] * total + 1e-9))
    return n_train, n_val, total - n_train - n_val


def split_corpus(records, fractions=(0.70, 0.15, 0.15), seq_len: int = 1):
    """Contiguous chronological split; the rounding remainder goes to the test set."""
    n_train, n_val, _ = _split_sizes(len(records), fractions)
    if n_train < seq_len:
        raise ValueError(f"corpus too small: {n_train} training epochs for sequence length {seq_len}")
    return (records[:n_train], records[n_train:n_train + n_val], records[n_train + n_val:])


def split_indices(total, fractions=(0.70, 0.15, 0.15)):
    n_train, n_val, _ = _split_sizes(total, fractions)
    idx = np.arange(total)
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


def _header(n):
    return (
        ["epoch"]
        + [f"z_P{i}" for i in range(1, n + 1)]
        + [f"z_Q{i}" for i in range(1, n + 1)]
        + [f"theta_{i}" for i in range(1, n + 1)]
        + [f"v_{i}" for i in range(1, n + 1)]
        + [f"theta_dc_{i}" for i in range(1, n + 1)]
        + ["n1_true", "n2_true"]
    )


def corpus_to_csv(corpus: Corpus) -> str:
    buf = io.StringIO()
    buf.write(",".join(_header(corpus.n_bus)) + "\n")
    for k in range(len(corpus)):
        vals = np.concatenate([corpus.z[k], corpus.theta[k], corpus.v[k], corpus.theta_dc[k]])
        buf.write(
            f"{int(corpus.epoch[k])},"
            + ",".join(repr(float(x)) for x in vals)
            + f",{int(corpus.n1[k])},{int(corpus.n2[k])}\n"
        )
    return buf.getvalue()


def write_corpus(corpus: Corpus, path) -> Path:
    """Write the CSV plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    text = corpus_to_csv(corpus)
    path.write_text(text)
    sidecar = path.with_suffix(".json")
    doc = {
        "generator": corpus.config,
        "case": corpus.case.to_dict(),
        "rows": len(corpus),
        "dropped": list(corpus.dropped),
        "csv_sha256": hashlib.sha256(text.encode()).hexdigest(),
    }
    sidecar.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return sidecar


def read_corpus(path, case: GridCase | None = None) -> Corpus:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    if case is None:
        if "case" not in meta:
            raise ValueError(f"{path}: no case given and no sidecar with a case document")
        case = case_from_dict(meta["case"])
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    n = case.n_bus
    if header != _header(n):
        raise ValueError(f"{path}: header does not match a {n}-bus corpus")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    col = 1
    z = data[:, col:col + 2 * n]; col += 2 * n
    theta = data[:, col:col + n]; col += n
    v = data[:, col:col + n]; col += n
    theta_dc = data[:, col:col + n]; col += n
    return Corpus(
        case=case, epoch=data[:, 0].astype(int), theta=theta, v=v, z=z, theta_dc=theta_dc,
        n1=data[:, col].astype(int), n2=data[:, col + 1].astype(int),
        config=meta.get("generator", {}), dropped=tuple(meta.get("dropped", ())),
    )
