"""Event ingestion, per-pixel temporal pairing, warping onto the panorama and
construction of linearized-event-generation residual terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, near_pole, pixel_bearing, project_equirect
from .panorama import GradientMap, ValidMask, nearest_pixel
from .trajectory import Trajectory

DEFAULT_CONTRAST = 0.2
BINARY_MAGIC = b"EVT1"
_BINARY_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

DROP_REASONS = ("zero_dt", "out_of_span", "pole", "invalid_pixel")


class NoTermsError(ValueError):
    pass


@dataclass
class EventArray:
    """Column-oriented event stream: time [s], pixel (x, y), polarity +-1."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ValueError("event columns differ in length")
        if n and not np.all(np.isin(self.p, (-1, 1))):
            raise ValueError("polarities must be +1 or -1")

    def __len__(self):
        return int(self.t.size)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    def subset(self, index):
        return EventArray(self.t[index], self.x[index], self.y[index], self.p[index])

    def check_sorted(self):
        bad = np.flatnonzero(np.diff(self.t) < 0)
        if bad.size:
            raise ValueError(f"event timestamps decrease at event {bad[0] + 1}")

    def check_bounds(self, cam: CameraModel):
        bad = (self.x < 0) | (self.x >= cam.width) | (self.y < 0) | (self.y >= cam.height)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise ValueError(f"event {k} at pixel ({self.x[k]}, {self.y[k]}) is outside the sensor")


def read_events_text(path):
    """Read ``t x y p`` lines (p in {0, 1}); rejects decreasing timestamps."""
    rows = []
    last_t = -np.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 't x y p'")
            t = float(parts[0])
            if t < last_t:
                raise ValueError(f"{path}:{lineno}: timestamp {t} is earlier than {last_t}")
            last_t = t
            pol = int(parts[3])
            if pol not in (0, 1, -1):
                raise ValueError(f"{path}:{lineno}: polarity must be 0 or 1")
            rows.append((t, int(parts[1]), int(parts[2]), 1 if pol == 1 else -1))
    if not rows:
        return EventArray.empty()
    arr = np.array(rows, dtype=float)
    return EventArray(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def write_events_text(path, ev: EventArray):
    with open(path, "w") as fh:
        fh.write("# t x y p\n")
        for t, x, y, p in zip(ev.t.tolist(), ev.x.tolist(), ev.y.tolist(), ev.p.tolist()):
            fh.write(f"{t:.9f} {x} {y} {1 if p > 0 else 0}\n")


def read_events_binary(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BINARY_MAGIC:
            raise ValueError(f"{path}: missing EVT1 header")
        rec = np.frombuffer(fh.read(), dtype=_BINARY_RECORD)
    p = rec["p"].astype(np.int8)
    p = np.where(p > 0, 1, -1)
    ev = EventArray(rec["t"], rec["x"], rec["y"], p)
    ev.check_sorted()
    return ev


def write_events_binary(path, ev: EventArray):
    rec = np.empty(len(ev), dtype=_BINARY_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = ev.t, ev.x, ev.y, ev.p
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(rec.tobytes())


def read_events(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return read_events_binary(path)
    return read_events_text(path)


def write_events(path, ev: EventArray):
    if str(path).endswith((".bin", ".evt")):
        write_events_binary(path, ev)
    else:
        write_events_text(path, ev)


# ---------------------------------------------------------------------------
# Pairing
# ---------------------------------------------------------------------------


@dataclass
class EventPairs:
    """Each event ``k`` that has a predecessor at its pixel, with ``dt = t_k - t_prev``."""

    index: np.ndarray
    dt: np.ndarray
    last_timestamp: np.ndarray = field(repr=False)  # per camera pixel, NaN if silent

    def __len__(self):
        return int(self.index.size)


def pair_events(ev: EventArray, sensor_shape=None):
    """Pair every event with the previous event at the same camera pixel.

    Polarity is ignored; the first event at each pixel starts the chain and
    produces no pair. ``sensor_shape`` is ``(height, width)``.
    """
    ev.check_sorted()
    if sensor_shape is None:
        h = int(ev.y.max()) + 1 if len(ev) else 1
        w = int(ev.x.max()) + 1 if len(ev) else 1
    else:
        h, w = sensor_shape
    pix = ev.y * w + ev.x
    order = np.lexsort((np.arange(len(ev)), pix))  # stable: by pixel, then time
    same = pix[order[1:]] == pix[order[:-1]]
    cur = order[1:][same]
    prev = order[:-1][same]
    sort = np.argsort(cur, kind="stable")
    cur, prev = cur[sort], prev[sort]
    last = np.full(h * w, np.nan)
    last[pix] = ev.t  # later events overwrite earlier ones
    return EventPairs(cur, ev.t[cur] - ev.t[prev], last.reshape(h, w))


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def warp_event(x, t, traj: Trajectory, cam: CameraModel, width, height):
    """Panorama point of pixel ``x`` seen at time ``t``."""
    z = traj.interpolate(t) @ pixel_bearing(x, cam)
    return project_equirect(z, width, height)


def event_bearings(ev: EventArray, cam: CameraModel):
    table = cam.all_pixel_bearings()
    return table[ev.y, ev.x]


def count_map_hits(ev: EventArray, traj: Trajectory, cam: CameraModel, width, height, segment_logs=None):
    """Number of events whose warped position falls on each map pixel."""
    keep = traj.contains(ev.t)
    f = event_bearings(ev, cam)[keep]
    seg, tau = traj.interp_weights(ev.t[keep])
    z = traj.rotate(seg, tau, f, segment_logs)
    ok = ~near_pole(z)
    p = project_equirect(z[ok], width, height)
    iu, iv = nearest_pixel(p, width, height)
    counts = np.bincount(iv * width + iu, minlength=width * height)
    return counts.reshape(height, width)


# ---------------------------------------------------------------------------
# Residual terms
# ---------------------------------------------------------------------------


@dataclass
class EventStats:
    n_events: int
    n_pairs: int
    n_terms: int
    dropped: dict
    last_timestamp: np.ndarray | None = field(default=None, repr=False)
    map_counts: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_dropped(self):
        return int(sum(self.dropped.values()))


@dataclass
class TermSet:
    """Structure-of-arrays view of every surviving residual term at an operating point."""

    event: np.ndarray  # index into the event stream
    measured: np.ndarray  # p_k * C
    t_k: np.ndarray
    t_prev: np.ndarray
    z_k: np.ndarray  # rotated bearings at t_k, (N, 3)
    z_prev: np.ndarray
    p_k: np.ndarray  # map points, (N, 2)
    p_prev: np.ndarray
    dp: np.ndarray  # p_k - p_prev, u wrapped to (-W/2, W/2]
    pixel: np.ndarray  # index into the valid-pixel list
    seg_k: np.ndarray  # segment index of t_k
    tau_k: np.ndarray
    seg_prev: np.ndarray
    tau_prev: np.ndarray

    def __len__(self):
        return int(self.event.size)

    def subset(self, index):
        return TermSet(**{k: v[index] for k, v in self.__dict__.items()})


def build_terms(
    ev: EventArray,
    pairs: EventPairs,
    traj: Trajectory,
    cam: CameraModel,
    mask: ValidMask,
    contrast=DEFAULT_CONTRAST,
    bearings=None,
    segment_logs=None,
    allow_empty=False,
):
    """Associate every paired event with one valid map pixel at the current trajectory.

    Returns ``(TermSet, EventStats)``; dropped terms are counted per reason.
    """
    if not contrast > 0:
        raise ValueError("contrast threshold must be positive")
    width, height = mask.width, mask.height
    if bearings is None:
        bearings = event_bearings(ev, cam)
    if segment_logs is None:
        segment_logs = traj.segment_logs()
    dropped = dict.fromkeys(DROP_REASONS, 0)

    idx = pairs.index
    dt = pairs.dt
    pos = dt > 0
    dropped["zero_dt"] = int(np.count_nonzero(~pos))
    idx, dt = idx[pos], dt[pos]

    t_k = ev.t[idx]
    t_prev = t_k - dt
    in_span = traj.contains(t_k) & traj.contains(t_prev)
    dropped["out_of_span"] = int(np.count_nonzero(~in_span))
    idx, t_k, t_prev = idx[in_span], t_k[in_span], t_prev[in_span]

    f = bearings[idx]
    seg_k, tau_k = traj.interp_weights(t_k)
    seg_p, tau_p = traj.interp_weights(t_prev)
    z_k = traj.rotate(seg_k, tau_k, f, segment_logs)
    z_p = traj.rotate(seg_p, tau_p, f, segment_logs)
    off_pole = ~(near_pole(z_k) | near_pole(z_p))
    dropped["pole"] = int(np.count_nonzero(~off_pole))
    sel = np.flatnonzero(off_pole)
    z_k, z_p = z_k[sel], z_p[sel]
    p_k = project_equirect(z_k, width, height)
    p_p = project_equirect(z_p, width, height)
    iu, iv = nearest_pixel(p_k, width, height)
    pix = mask.valid_index(iu, iv)
    ok = pix >= 0
    dropped["invalid_pixel"] = int(np.count_nonzero(~ok))
    sel2 = sel[ok]

    dp = p_k[ok] - p_p[ok]
    dp[:, 0] = _wrap_du(dp[:, 0], width)
    terms = TermSet(
        event=idx[sel2],
        measured=ev.p[idx[sel2]].astype(float) * contrast,
        t_k=t_k[sel2],
        t_prev=t_prev[sel2],
        z_k=z_k[ok],
        z_prev=z_p[ok],
        p_k=p_k[ok],
        p_prev=p_p[ok],
        dp=dp,
        pixel=pix[ok],
        seg_k=seg_k[sel2],
        tau_k=tau_k[sel2],
        seg_prev=seg_p[sel2],
        tau_prev=tau_p[sel2],
    )
    stats = EventStats(
        n_events=len(ev),
        n_pairs=len(pairs),
        n_terms=len(terms),
        dropped=dropped,
        last_timestamp=pairs.last_timestamp,
    )
    if len(terms) == 0 and not allow_empty:
        raise NoTermsError(f"no residual terms survived (dropped: {dropped})")
    return terms, stats


def _wrap_du(du, width):
    return du - width * np.round(du / width)


def predicted_contrast(terms: TermSet, G: GradientMap, mask: ValidMask):
    iu, iv = mask.pixel_of(terms.pixel)
    g = G.data[iv, iu]
    return np.einsum("ni,ni->n", g, terms.dp)


def residual(terms: TermSet, G: GradientMap, mask: ValidMask):
    """``G(p_k) . dp - p_k C`` for every term."""
    return predicted_contrast(terms, G, mask) - terms.measured
