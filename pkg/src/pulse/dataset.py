"""Dataset containers and the synthetic multichannel generator.

Two file formats build on :mod:`pulse.container`:

* ``pulse-record/1`` — one subject's raw synchronized streams (per-channel
  sample rates preserved) plus an integer label stream.
* ``pulse-fold/1`` — one leave-one-subject-out fold: train/test window
  tensors, target waveforms, labels, and per-subject baseline statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .container import read_container, write_container
from .errors import FormatError, InvariantError, ShapeError

RECORD_FORMAT = "pulse-record/1"
FOLD_FORMAT = "pulse-fold/1"

CHANNEL_NAMES = ("ECG", "BVP", "ACC_x", "ACC_y", "ACC_z", "TEMP", "EDA")
FOLD_CHANNELS = ("ECG", "BVP", "TEMP", "ACC_net")
WINDOW_LEN = 3840

LABEL_BASELINE = 1
LABEL_STRESS = 2
LABEL_AMUSEMENT = 3
VALID_LABELS = (LABEL_BASELINE, LABEL_STRESS, LABEL_AMUSEMENT)


@dataclass
class SignalRecord:
    """One subject's raw streams: channel name -> (samples, rate_hz)."""

    subject_id: str
    channels: dict  # name -> (np.ndarray float32, float rate)
    labels: np.ndarray  # int32
    label_rate: float

    def duration_s(self) -> float:
        return len(self.labels) / self.label_rate

    def validate(self) -> None:
        if not self.channels:
            raise InvariantError("record has no channels")
        label_dur = self.duration_s()
        for name, (samples, rate) in self.channels.items():
            if name not in CHANNEL_NAMES:
                raise InvariantError(f"unknown channel name {name!r}")
            if rate <= 0:
                raise InvariantError(f"channel {name}: rate must be > 0, got {rate}")
            dur = len(samples) / rate
            tol = max(1.0 / rate, 1.0 / self.label_rate)
            if abs(dur - label_dur) > tol + 1e-9:
                raise InvariantError(
                    f"channel {name}: duration {dur:.4f}s deviates from label duration "
                    f"{label_dur:.4f}s by more than one sample period")


@dataclass
class FoldArchive:
    """One LOSO fold with train/test windows and de-normalization stats."""

    fold_id: int
    x_train: np.ndarray  # [n_train, 4, 3840] float32, channels = FOLD_CHANNELS
    y_train: np.ndarray  # [n_train, 3840] float32 target waveform
    l_train: np.ndarray  # [n_train] int32
    x_test: np.ndarray
    y_test: np.ndarray
    l_test: np.ndarray
    test_subject: str
    train_subjects: list
    baseline_stats: dict  # subject -> channel -> (mean, std), float32 values
    channels: tuple = FOLD_CHANNELS

    def validate(self) -> None:
        for name, x, y, l in (("train", self.x_train, self.y_train, self.l_train),
                              ("test", self.x_test, self.y_test, self.l_test)):
            if x.ndim != 3 or x.shape[1] != len(self.channels):
                raise ShapeError(f"X_{name}: expected [n, {len(self.channels)}, {WINDOW_LEN}], got {x.shape}")
            if x.shape[2] != WINDOW_LEN:
                raise ShapeError(f"X_{name}: window length {x.shape[2]} != {WINDOW_LEN}")
            if y.shape != (x.shape[0], WINDOW_LEN):
                raise ShapeError(f"Y_{name}: shape {y.shape} inconsistent with X {x.shape}")
            if l.shape != (x.shape[0],):
                raise ShapeError(f"L_{name}: shape {l.shape} inconsistent with X {x.shape}")
            if l.size and not np.isin(l, VALID_LABELS).all():
                bad = sorted(set(np.asarray(l).tolist()) - set(VALID_LABELS))
                raise InvariantError(f"L_{name}: labels {bad} outside {{1,2,3}}")
        if self.test_subject in self.train_subjects:
            raise InvariantError(f"test subject {self.test_subject!r} also present in train set")
        for subject, stats in self.baseline_stats.items():
            for channel, (mean, std) in stats.items():
                if not std > 0:
                    raise InvariantError(f"stats[{subject}][{channel}]: std must be > 0, got {std}")


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic dataset generator.

    ``coupling`` in [0, 1] scales how strongly a latent two-state arousal
    process drives every channel; the synthetic EDA gets the largest share
    so it stays the most informative channel.
    """

    n_subjects: int = 6
    duration_s: float = 240.0
    seed: int = 0
    coupling: float = 0.8
    three_class: bool = False

    def validate(self) -> None:
        if self.n_subjects < 3:
            raise InvariantError(f"n_subjects must be >= 3, got {self.n_subjects}")
        if self.duration_s < 3 * 60.0:
            raise InvariantError(f"duration_s must be >= 180, got {self.duration_s}")
        if not 0.0 <= self.coupling <= 1.0:
            raise InvariantError(f"coupling must be in [0, 1], got {self.coupling}")


# ---------------------------------------------------------------------------
# Record container IO


def write_signal_record(record: SignalRecord, path) -> None:
    record.validate()
    arrays = {"labels": np.asarray(record.labels, dtype=np.int32)}
    rates = {}
    for name, (samples, rate) in record.channels.items():
        arrays[f"channel/{name}"] = np.asarray(samples, dtype=np.float32)
        rates[name] = float(rate)
    meta = {"subject_id": record.subject_id, "rates": rates,
            "label_rate": float(record.label_rate)}
    write_container(path, RECORD_FORMAT, arrays, meta)


def read_signal_record(path) -> SignalRecord:
    fmt, arrays, meta = read_container(path, expect_format=RECORD_FORMAT)
    if "labels" not in arrays:
        raise FormatError(f"{path}: missing labels array")
    channels = {}
    for name, rate in meta.get("rates", {}).items():
        key = f"channel/{name}"
        if key not in arrays:
            raise FormatError(f"{path}: manifest names channel {name} but array is missing")
        channels[name] = (arrays[key], float(rate))
    record = SignalRecord(subject_id=meta["subject_id"], channels=channels,
                          labels=arrays["labels"], label_rate=float(meta["label_rate"]))
    record.validate()
    return record


# ---------------------------------------------------------------------------
# Fold container IO


def write_fold_archive(fold: FoldArchive, path) -> None:
    fold.validate()
    arrays = {
        "X_train": np.asarray(fold.x_train, dtype=np.float32),
        "Y_train": np.asarray(fold.y_train, dtype=np.float32),
        "L_train": np.asarray(fold.l_train, dtype=np.int32),
        "X_test": np.asarray(fold.x_test, dtype=np.float32),
        "Y_test": np.asarray(fold.y_test, dtype=np.float32),
        "L_test": np.asarray(fold.l_test, dtype=np.int32),
    }
    stats = {subj: {ch: [float(np.float32(m)), float(np.float32(s))]
                    for ch, (m, s) in by_channel.items()}
             for subj, by_channel in fold.baseline_stats.items()}
    meta = {
        "fold_id": int(fold.fold_id),
        "test_subject": fold.test_subject,
        "train_subjects": list(fold.train_subjects),
        "channels": list(fold.channels),
        "baseline_stats": stats,
    }
    write_container(path, FOLD_FORMAT, arrays, meta)


def read_fold_archive(path) -> FoldArchive:
    fmt, arrays, meta = read_container(path, expect_format=FOLD_FORMAT)
    required = ("X_train", "Y_train", "L_train", "X_test", "Y_test", "L_test")
    for name in required:
        if name not in arrays:
            raise FormatError(f"{path}: missing array {name}")
    stats = {subj: {ch: (np.float32(ms[0]), np.float32(ms[1]))
                    for ch, ms in by_channel.items()}
             for subj, by_channel in meta.get("baseline_stats", {}).items()}
    fold = FoldArchive(
        fold_id=int(meta["fold_id"]),
        x_train=arrays["X_train"], y_train=arrays["Y_train"], l_train=arrays["L_train"],
        x_test=arrays["X_test"], y_test=arrays["Y_test"], l_test=arrays["L_test"],
        test_subject=meta["test_subject"],
        train_subjects=list(meta["train_subjects"]),
        baseline_stats=stats,
        channels=tuple(meta.get("channels", FOLD_CHANNELS)),
    )
    fold.validate()
    return fold


def folds_equal(a: FoldArchive, b: FoldArchive) -> bool:
    """Bitwise equality over every array and stat."""
    array_pairs = ((a.x_train, b.x_train), (a.y_train, b.y_train), (a.l_train, b.l_train),
                   (a.x_test, b.x_test), (a.y_test, b.y_test), (a.l_test, b.l_test))
    if not all(x.shape == y.shape and np.array_equal(x, y) for x, y in array_pairs):
        return False
    if (a.fold_id, a.test_subject, list(a.train_subjects), tuple(a.channels)) != \
       (b.fold_id, b.test_subject, list(b.train_subjects), tuple(b.channels)):
        return False
    if set(a.baseline_stats) != set(b.baseline_stats):
        return False
    for subj in a.baseline_stats:
        sa, sb = a.baseline_stats[subj], b.baseline_stats[subj]
        if set(sa) != set(sb):
            return False
        for ch in sa:
            if np.float32(sa[ch][0]) != np.float32(sb[ch][0]):
                return False
            if np.float32(sa[ch][1]) != np.float32(sb[ch][1]):
                return False
    return True


# ---------------------------------------------------------------------------
# Synthetic generation

_MASTER_RATE = 64.0
_RATES = {"ECG": 700.0, "BVP": 64.0, "ACC_x": 32.0, "ACC_y": 32.0,
          "ACC_z": 32.0, "TEMP": 4.0, "EDA": 4.0}
_TRANSITION_S = 2.0  # label-0 gap inserted at every state change


def _ar1(rng, n: int, rate: float, tau_s: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) noise with correlation time tau_s and std sigma."""
    a = math.exp(-1.0 / (tau_s * rate))
    innov = rng.standard_normal(n) * (sigma * math.sqrt(1.0 - a * a))
    out = lfilter([1.0], [1.0, -a], innov)
    return np.asarray(out)


def _smooth_drive(state_targets: np.ndarray, rate: float, tau_s: float = 6.0) -> np.ndarray:
    a = math.exp(-1.0 / (tau_s * rate))
    return np.asarray(lfilter([1.0 - a], [1.0, -a], state_targets))


def _resample_linear(x: np.ndarray, src_rate: float, n_out: int, dst_rate: float) -> np.ndarray:
    t_out = np.arange(n_out) / dst_rate
    t_src = np.arange(len(x)) / src_rate
    return np.interp(t_out, t_src, x)


def _scr_kernel(rate: float) -> np.ndarray:
    """Bi-exponential bump (fast rise, slow decay), peak-normalized."""
    t = np.arange(0, 12.0, 1.0 / rate)
    k = np.exp(-t / 3.0) - np.exp(-t / 0.7)
    return k / k.max()


def _make_segments(rng, duration_s: float, three_class: bool) -> list:
    """Alternating (label, length_s) segments; starts with a long baseline."""
    segments = [(LABEL_BASELINE, float(rng.uniform(70.0, 95.0)))]
    total = segments[0][1]
    while total < duration_s:
        prev = segments[-1][0]
        if prev == LABEL_BASELINE:
            if three_class:
                nxt = LABEL_STRESS if rng.random() < 0.5 else LABEL_AMUSEMENT
            else:
                nxt = LABEL_STRESS
        else:
            nxt = LABEL_BASELINE
        length = float(rng.uniform(60.0, 90.0))
        segments.append((nxt, length))
        total += length
    return segments


def _generate_subject(subject_id: str, cfg: SyntheticConfig, rng) -> SignalRecord:
    c = cfg.coupling
    n64 = int(round(cfg.duration_s * _MASTER_RATE))

    # Latent state and label stream at the 64 Hz master clock.
    labels = np.empty(n64, dtype=np.int32)
    targets = np.empty(n64, dtype=np.float64)
    drive_level = {LABEL_BASELINE: 0.0, LABEL_STRESS: 1.0, LABEL_AMUSEMENT: 0.55}
    pos = 0
    gap = int(_TRANSITION_S * _MASTER_RATE)
    for i, (label, length_s) in enumerate(_make_segments(rng, cfg.duration_s, cfg.three_class)):
        end = min(n64, pos + int(round(length_s * _MASTER_RATE)))
        labels[pos:end] = label
        targets[pos:end] = drive_level[label]
        if i > 0:
            labels[pos: min(n64, pos + gap)] = 0
        pos = end
        if pos >= n64:
            break
    drive64 = _smooth_drive(targets, _MASTER_RATE)

    def drive(rate: float, n: int) -> np.ndarray:
        return _resample_linear(drive64, _MASTER_RATE, n, rate)

    gain = {name: float(np.exp(rng.normal(0.0, 0.15))) for name in _RATES}
    hr0 = float(rng.uniform(1.0, 1.3))  # beats/s

    channels = {}

    # EDA: tonic level + arousal-rate SCR bursts; strongest coupling by design.
    rate = _RATES["EDA"]
    n = int(round(cfg.duration_s * rate))
    d = drive(rate, n)
    tonic = 2.0 + rng.normal(0.0, 0.3) + _ar1(rng, n, rate, 20.0, 0.15) + 0.9 * c * d
    scr_rate = (0.03 + 0.40 * c * d) / rate  # events per sample
    events = (rng.random(n) < scr_rate).astype(np.float64)
    amplitudes = np.exp(rng.normal(0.0, 0.3, size=n)) * (0.5 + 0.9 * c * d)
    scr = np.convolve(events * amplitudes, _scr_kernel(rate))[:n]
    channels["EDA"] = (gain["EDA"] * (tonic + scr) + 0.03 * rng.standard_normal(n), rate)

    # TEMP: slow drift with a weak arousal shift.
    rate = _RATES["TEMP"]
    n = int(round(cfg.duration_s * rate))
    d = drive(rate, n)
    temp = 33.0 + rng.normal(0.0, 0.4) + _ar1(rng, n, rate, 30.0, 0.25) \
        + 0.22 * c * d + 0.02 * rng.standard_normal(n)
    channels["TEMP"] = (gain["TEMP"] * temp, rate)

    # BVP: pulse wave with arousal-driven amplitude and heart rate.
    rate = _RATES["BVP"]
    n = int(round(cfg.duration_s * rate))
    d = drive(rate, n)
    freq = hr0 * (1.0 + 0.15 * c * d)
    phase = 2.0 * np.pi * np.cumsum(freq) / rate
    bvp = (1.0 + 0.45 * c * d) * np.sin(phase) + 0.35 * rng.standard_normal(n)
    channels["BVP"] = (gain["BVP"] * bvp, rate)

    # ECG: harmonic spike train sharing the heart-rate process.
    rate = _RATES["ECG"]
    n = int(round(cfg.duration_s * rate))
    d = drive(rate, n)
    freq = hr0 * (1.0 + 0.15 * c * d)
    phase = 2.0 * np.pi * np.cumsum(freq) / rate
    wave = np.sin(phase) + 0.6 * np.sin(2 * phase) + 0.3 * np.sin(3 * phase)
    ecg = (1.0 + 0.30 * c * d) * 0.5 * wave + 0.25 * rng.standard_normal(n)
    channels["ECG"] = (gain["ECG"] * ecg, rate)

    # ACC: gravity + posture sway + motion noise that grows with arousal.
    rate = _RATES["ACC_x"]
    n = int(round(cfg.duration_s * rate))
    d = drive(rate, n)
    gravity = {"ACC_x": 0.1, "ACC_y": 0.1, "ACC_z": 1.0}
    for axis in ("ACC_x", "ACC_y", "ACC_z"):
        sway = _ar1(rng, n, rate, 3.0, 0.05)
        motion = 0.10 * rng.standard_normal(n) * (1.0 + 1.0 * c * d)
        channels[axis] = (gain[axis] * (gravity[axis] + sway + motion), rate)

    channels = {name: (np.asarray(x, dtype=np.float32), r) for name, (x, r) in channels.items()}
    return SignalRecord(subject_id=subject_id, channels=channels,
                        labels=labels, label_rate=_MASTER_RATE)


def generate_synthetic_dataset(cfg: SyntheticConfig) -> list:
    """Deterministically generate one SignalRecord per subject."""
    cfg.validate()
    records = []
    for i in range(cfg.n_subjects):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, i])))
        records.append(_generate_subject(f"s{i:02d}", cfg, rng))
    return records
