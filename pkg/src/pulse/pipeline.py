"""End-to-end preprocessing: resample, clean, segment, normalize, fold.

Stage order: resample -> per-channel filters -> net acceleration ->
segmentation with label purity -> per-subject baseline z-scoring ->
low-variance rejection -> LOSO fold assembly. ECG is the one exception to
resample-first: its 0.5-40 Hz band cannot be realized at the 64 Hz target
rate (upper edge exceeds Nyquist), so it is filtered at the native rate and
resampled afterwards, which composes to the same effective band.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.signal import butter, resample_poly, sosfilt, sosfiltfilt

from .dataset import FOLD_CHANNELS, FoldArchive, SignalRecord, VALID_LABELS, WINDOW_LEN
from .errors import InvariantError, NumericsError

log = logging.getLogger(__name__)

TARGET_RATE = 64.0
POLYPHASE_CHANNELS = ("ECG", "BVP", "ACC_x", "ACC_y", "ACC_z")
LINEAR_CHANNELS = ("EDA", "TEMP")

ECG_BAND = (0.5, 40.0)
BVP_BAND = (0.5, 2.0)
EDA_HIGHPASS_HZ = 0.05
EDA_PHASIC_BAND = (0.05, 1.0)
STD_REJECT_THRESHOLD = 0.02
STD_REJECT_CHANNELS = ("ECG", "BVP")


@dataclass(frozen=True)
class FilterSpec:
    kind: str  # "highpass" | "bandpass"
    order: int
    cutoffs_hz: tuple
    rate_hz: float

    def validate(self) -> None:
        if self.kind not in ("highpass", "bandpass"):
            raise InvariantError(f"unknown filter kind {self.kind!r}")
        if self.order < 1:
            raise InvariantError(f"filter order must be >= 1, got {self.order}")
        nyq = self.rate_hz / 2.0
        expected = 2 if self.kind == "bandpass" else 1
        if len(self.cutoffs_hz) != expected:
            raise InvariantError(f"{self.kind} takes {expected} cutoff(s), got {self.cutoffs_hz}")
        for c in self.cutoffs_hz:
            if not 0.0 < c < nyq:
                raise InvariantError(f"cutoff {c} Hz not strictly inside (0, {nyq}) at rate {self.rate_hz}")
        if self.kind == "bandpass" and not self.cutoffs_hz[0] < self.cutoffs_hz[1]:
            raise InvariantError(f"bandpass cutoffs must satisfy low < high, got {self.cutoffs_hz}")


@dataclass(frozen=True)
class WindowSpec:
    length_samples: int = WINDOW_LEN
    stride_samples: int = 16  # 0.25 s at 64 Hz
    target_rate_hz: float = TARGET_RATE

    def validate(self) -> None:
        if self.length_samples <= 0 or self.stride_samples <= 0:
            raise InvariantError("window length and stride must be positive")
        if self.stride_samples > self.length_samples:
            raise InvariantError("stride must not exceed window length")


@dataclass
class WindowSet:
    """Segmented, normalized windows for one subject."""

    subject_id: str
    windows: dict  # channel -> [n, length] float32
    labels: np.ndarray  # [n] int32
    starts: np.ndarray  # [n] int64, window start sample at 64 Hz
    stats: dict | None = None  # channel -> (mean, std)
    counts: dict = field(default_factory=dict)  # bookkeeping for the summary


# ---------------------------------------------------------------------------
# Resampling and filtering


def resample(signal, src_hz: float, dst_hz: float, method: str) -> np.ndarray:
    """Resample to round(n * dst/src) samples.

    ``linear`` interpolates between neighbors (edge segments extrapolate, so
    piecewise-linear inputs are reproduced exactly); ``polyphase`` applies an
    anti-aliasing FIR at min(src, dst)/2 via rational-ratio polyphase
    filtering.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvariantError("resample expects a non-empty 1-D signal")
    if not np.isfinite(x).all():
        raise NumericsError("resample: non-finite samples in input")
    if src_hz <= 0 or dst_hz <= 0:
        raise InvariantError("sample rates must be positive")
    n_out = int(round(x.size * dst_hz / src_hz))
    if method == "linear":
        if x.size == 1:
            return np.full(n_out, x[0])
        pos = np.arange(n_out) * (src_hz / dst_hz)
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, x.size - 2)
        frac = pos - i0
        return x[i0] * (1.0 - frac) + x[i0 + 1] * frac
    if method == "polyphase":
        ratio = Fraction(dst_hz / src_hz).limit_denominator(10 ** 6)
        up, down = ratio.numerator, ratio.denominator
        out = resample_poly(x, up, down, padtype="mean")
        if out.size < n_out:
            out = np.pad(out, (0, n_out - out.size), mode="edge")
        return out[:n_out]
    raise InvariantError(f"unknown resample method {method!r}")


def design_filter(spec: FilterSpec):
    spec.validate()
    btype = "highpass" if spec.kind == "highpass" else "bandpass"
    cutoffs = spec.cutoffs_hz[0] if spec.kind == "highpass" else list(spec.cutoffs_hz)
    return butter(spec.order, cutoffs, btype=btype, fs=spec.rate_hz, output="sos")


def apply_filter(signal, spec: FilterSpec, zero_phase: bool = True) -> np.ndarray:
    """Butterworth filtering; zero_phase runs forward-backward (no group delay)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size <= 3 * spec.order:
        raise InvariantError(f"signal length {x.size} too short for order {spec.order}")
    sos = design_filter(spec)
    return sosfiltfilt(sos, x) if zero_phase else sosfilt(sos, x)


def net_magnitude(acc_x, acc_y, acc_z) -> np.ndarray:
    """Element-wise Euclidean norm of the three wrist acceleration axes."""
    ax, ay, az = (np.asarray(a, dtype=np.float64) for a in (acc_x, acc_y, acc_z))
    if not (ax.shape == ay.shape == az.shape):
        raise InvariantError(f"axis length mismatch: {ax.shape}, {ay.shape}, {az.shape}")
    return np.sqrt(ax * ax + ay * ay + az * az)


# ---------------------------------------------------------------------------
# Segmentation and normalization


def segment_windows(streams: dict, labels, spec: WindowSpec) -> WindowSet:
    """Cut synchronized streams into label-pure windows.

    A window is kept only when all of its label samples equal one value in
    {1, 2, 3}; transient (label 0) and mixed windows are dropped. Streams
    shorter than one window yield an empty set.
    """
    spec.validate()
    labels = np.asarray(labels)
    lengths = {name: len(x) for name, x in streams.items()}
    if len(set(lengths.values()) | {len(labels)}) != 1:
        raise InvariantError(f"stream/label length mismatch: {lengths}, labels {len(labels)}")
    n = len(labels)
    length, stride = spec.length_samples, spec.stride_samples

    if n < length:
        empty = {name: np.empty((0, length), dtype=np.float32) for name in streams}
        return WindowSet(subject_id="", windows=empty,
                         labels=np.empty(0, dtype=np.int32), starts=np.empty(0, dtype=np.int64),
                         counts={"candidates": 0, "pure": 0})

    starts = np.arange(0, n - length + 1, stride, dtype=np.int64)
    # Segment-id trick: a window is single-label iff its first and last
    # samples fall in the same constant run.
    seg_id = np.concatenate([[0], np.cumsum(labels[1:] != labels[:-1])])
    first = labels[starts]
    pure = (seg_id[starts] == seg_id[starts + length - 1]) & np.isin(first, VALID_LABELS)
    kept = starts[pure]

    windows = {}
    for name, x in streams.items():
        view = np.lib.stride_tricks.sliding_window_view(np.asarray(x), length)
        windows[name] = view[kept].astype(np.float32)
    return WindowSet(subject_id="", windows=windows,
                     labels=labels[kept].astype(np.int32), starts=kept,
                     counts={"candidates": int(len(starts)), "pure": int(pure.sum())})


def reject_low_variance(windows: dict, channels=STD_REJECT_CHANNELS,
                        threshold: float = STD_REJECT_THRESHOLD) -> np.ndarray:
    """Keep-mask over z-scored windows: every named channel must have std >= threshold."""
    missing = [ch for ch in channels if ch not in windows]
    if missing:
        raise InvariantError(f"variance rejection needs channels {missing}")
    n = next(iter(windows.values())).shape[0]
    keep = np.ones(n, dtype=bool)
    for ch in channels:
        std = np.asarray(windows[ch], dtype=np.float64).std(axis=1)
        keep &= std >= threshold
    return keep


def baseline_zscore(windows: dict, labels, subject_id: str):
    """Per-channel z-scoring with statistics from this subject's baseline windows.

    Returns (normalized windows, stats) where stats maps channel -> (mean, std)
    computed over the concatenation of all label-1 windows.
    """
    labels = np.asarray(labels)
    base = labels == 1
    if not base.any():
        raise InvariantError(f"subject {subject_id}: no baseline (label 1) windows to normalize with")
    normalized, stats = {}, {}
    for ch, w in windows.items():
        pool = np.asarray(w[base], dtype=np.float64).ravel()
        mean = float(pool.mean())
        std = float(pool.std())
        if std < 1e-8:
            raise InvariantError(f"subject {subject_id}: channel {ch} is degenerate (std {std:.3e})")
        normalized[ch] = ((np.asarray(w, dtype=np.float64) - mean) / std).astype(np.float32)
        stats[ch] = (mean, std)
    return normalized, stats


def build_loso_folds(window_sets: list) -> list:
    """One fold per subject: fold k tests on subject k, trains on the rest."""
    if len(window_sets) < 2:
        raise InvariantError("leave-one-subject-out needs at least 2 subjects")
    for ws in window_sets:
        missing = [ch for ch in FOLD_CHANNELS + ("EDA",) if ch not in ws.windows]
        if missing:
            raise InvariantError(f"subject {ws.subject_id}: missing channels {missing}")
        if ws.stats is None:
            raise InvariantError(f"subject {ws.subject_id}: windows were never normalized")
    all_stats = {ws.subject_id: ws.stats for ws in window_sets}

    def stack(ws_list):
        xs = [np.stack([ws.windows[ch] for ch in FOLD_CHANNELS], axis=1).astype(np.float32)
              for ws in ws_list]
        ys = [ws.windows["EDA"].astype(np.float32) for ws in ws_list]
        ls = [ws.labels.astype(np.int32) for ws in ws_list]
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(ls)

    folds = []
    for k, test_ws in enumerate(window_sets, start=1):
        train_ws = [ws for ws in window_sets if ws is not test_ws]
        x_tr, y_tr, l_tr = stack(train_ws)
        x_te, y_te, l_te = stack([test_ws])
        fold = FoldArchive(
            fold_id=k,
            x_train=x_tr, y_train=y_tr, l_train=l_tr,
            x_test=x_te, y_test=y_te, l_test=l_te,
            test_subject=test_ws.subject_id,
            train_subjects=[ws.subject_id for ws in train_ws],
            baseline_stats=all_stats,
        )
        fold.validate()
        folds.append(fold)
    return folds


# ---------------------------------------------------------------------------
# Whole-record driver


def preprocess_record(record: SignalRecord, spec: WindowSpec = WindowSpec(),
                      std_threshold: float = STD_REJECT_THRESHOLD,
                      bandpass_order: int = 4, zero_phase: bool = True) -> WindowSet:
    """Resample/clean one subject's record and return its normalized WindowSet."""
    record.validate()
    rate = spec.target_rate_hz
    streams = {}

    def get(name):
        if name not in record.channels:
            raise InvariantError(f"record {record.subject_id}: missing channel {name}")
        return record.channels[name]

    ecg, ecg_rate = get("ECG")
    if ECG_BAND[1] < ecg_rate / 2.0:
        ecg_f = apply_filter(ecg, FilterSpec("bandpass", bandpass_order, ECG_BAND, ecg_rate), zero_phase)
        streams["ECG"] = resample(ecg_f, ecg_rate, rate, "polyphase")
    else:
        # Native rate too low for the nominal band; rely on the resampler's
        # anti-aliasing low-pass for the upper edge.
        high = min(ECG_BAND[1], 0.45 * rate)
        ecg_r = resample(ecg, ecg_rate, rate, "polyphase")
        streams["ECG"] = apply_filter(ecg_r, FilterSpec("bandpass", bandpass_order, (ECG_BAND[0], high), rate), zero_phase)
        log.warning("ECG upper cutoff clamped to %.1f Hz (native rate %.0f Hz)", high, ecg_rate)

    bvp, bvp_rate = get("BVP")
    bvp_r = bvp if bvp_rate == rate else resample(bvp, bvp_rate, rate, "polyphase")
    streams["BVP"] = apply_filter(bvp_r, FilterSpec("bandpass", bandpass_order, BVP_BAND, rate), zero_phase)

    axes = []
    for name in ("ACC_x", "ACC_y", "ACC_z"):
        acc, acc_rate = get(name)
        axes.append(resample(acc, acc_rate, rate, "polyphase"))
    n_acc = min(len(a) for a in axes)
    streams["ACC_net"] = net_magnitude(axes[0][:n_acc], axes[1][:n_acc], axes[2][:n_acc])

    temp, temp_rate = get("TEMP")
    streams["TEMP"] = resample(temp, temp_rate, rate, "linear")

    eda, eda_rate = get("EDA")
    eda_r = resample(eda, eda_rate, rate, "linear")
    eda_hp = apply_filter(eda_r, FilterSpec("highpass", 1, (EDA_HIGHPASS_HZ,), rate), zero_phase)
    streams["EDA"] = apply_filter(eda_hp, FilterSpec("bandpass", bandpass_order, EDA_PHASIC_BAND, rate), zero_phase)

    labels = np.asarray(record.labels)
    if record.label_rate != rate:
        n_out = int(round(len(labels) * rate / record.label_rate))
        idx = np.clip(np.round(np.arange(n_out) * record.label_rate / rate).astype(np.int64),
                      0, len(labels) - 1)
        labels = labels[idx]

    n = min(min(len(x) for x in streams.values()), len(labels))
    streams = {name: x[:n] for name, x in streams.items()}
    labels = labels[:n]

    ws = segment_windows(streams, labels, spec)
    ws.subject_id = record.subject_id
    if ws.labels.size == 0:
        ws.counts["kept"] = 0
        return ws
    normalized, stats = baseline_zscore(ws.windows, ws.labels, record.subject_id)
    keep = reject_low_variance(normalized, STD_REJECT_CHANNELS, std_threshold)
    ws.windows = {ch: w[keep] for ch, w in normalized.items()}
    ws.labels = ws.labels[keep]
    ws.starts = ws.starts[keep]
    ws.stats = stats
    ws.counts["kept"] = int(keep.sum())
    ws.counts["variance_rejected"] = int((~keep).sum())
    return ws


def preprocess_records(records: list, spec: WindowSpec = WindowSpec(),
                       std_threshold: float = STD_REJECT_THRESHOLD,
                       bandpass_order: int = 4, zero_phase: bool = True) -> list:
    """Preprocess every record and assemble LOSO folds.

    Subjects whose streams yield no usable windows are dropped with a warning.
    """
    sets = []
    for record in records:
        ws = preprocess_record(record, spec, std_threshold, bandpass_order, zero_phase)
        if ws.labels.size == 0:
            log.warning("subject %s: no windows survived preprocessing, dropping", record.subject_id)
            continue
        sets.append(ws)
    return build_loso_folds(sets)
