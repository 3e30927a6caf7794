"""Contact inference from dynamics prediction error.

State sets are plain (n, d) arrays of tracked component positions.
Each executed transition is compared against the nominal-dynamics
prediction to produce labels in [0, 1] for the observed points and
[-1, 1] for the predicted points; visibility information then cleans
the labels and decides which points enter the datasets.

Two point sets are maintained: the memory set of everything collected
(minus purged stall data) and the active set that conditions the
surface estimate. Boolean masks flag entries that were injected while
the controller was stalled; those are wiped wholesale when refinement
runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .gpis import DEDUP_TOL
from .sensor import Camera, DepthData, visible

# Predicted displacements below this carry no contact signal; the
# observed label defaults to fully free.
EPS_DENOM = 1e-6

TAG_OBSERVED = 0
TAG_PREDICTED = 1
TAG_GOAL = 2


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-component distance between two (n, d) state sets."""
    return np.linalg.norm(np.asarray(a, float) - np.asarray(b, float), axis=-1)


@dataclass
class LabelBatch:
    """Labels and keep decisions for one transition.

    y labels the observed components (0 blocked .. 1 free); y_hat the
    predicted ones, fixed at 2y - 1 from generation. vis / near_cloud
    record the visibility and point-cloud proximity tests so dataset
    bookkeeping can tell contact-kept points from stall-kept ones.
    """

    y: np.ndarray
    y_hat: np.ndarray
    keep_obs: np.ndarray
    keep_pred: np.ndarray
    vis: np.ndarray
    near_cloud: np.ndarray


def gen_labels(
    x_t: np.ndarray,
    x_next: np.ndarray,
    x_pred: np.ndarray,
    dist_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> LabelBatch:
    """Label a transition by the ratio of realized to predicted motion.

    y_i = min(d(x_t, x_next) / d(x_t, x_pred), 1); a vanishing
    predicted displacement yields y_i = 1 (no motion commanded means no
    evidence of contact).
    """
    d = dist_fn or euclidean
    num = np.asarray(d(x_t, x_next), dtype=float)
    den = np.asarray(d(x_t, x_pred), dtype=float)
    if not np.all(np.isfinite(den)):
        raise ValueError("predicted displacement must be finite")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.minimum(num / den, 1.0)
    y = np.where(den < EPS_DENOM, 1.0, y)
    n = len(y)
    return LabelBatch(
        y=y,
        y_hat=2.0 * y - 1.0,
        keep_obs=np.zeros(n, dtype=bool),
        keep_pred=np.zeros(n, dtype=bool),
        vis=np.zeros(n, dtype=bool),
        near_cloud=np.zeros(n, dtype=bool),
    )


def pre_process(
    batch: LabelBatch,
    x_next: np.ndarray,
    cam: Optional[Camera],
    depth: Optional[DepthData],
    r_c: float,
    local_min: bool,
) -> LabelBatch:
    """Clean labels with visual input and decide what to keep.

    Visible components far from the cloud are free (label 1); visible
    components within r_c of a cloud point are surface contacts (label
    0). Occluded components whose prediction looks interior keep both
    their observed and predicted points. A detected stall keeps every
    observed component. Without a camera everything is treated as
    not visible.
    """
    if r_c <= 0.0:
        raise ValueError("r_c must be positive")
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    n = x_next.shape[0]
    if cam is not None and depth is not None:
        vis = visible(x_next, cam, depth.z)
        if depth.cloud.size:
            diff = x_next[:, None, :] - depth.cloud[None, :, :]
            near = np.min(np.linalg.norm(diff, axis=-1), axis=1) < r_c
        else:
            near = np.zeros(n, dtype=bool)
    else:
        vis = np.zeros(n, dtype=bool)
        near = np.zeros(n, dtype=bool)

    y = batch.y.copy()
    y[vis & ~near] = 1.0
    y[vis & near] = 0.0
    interior = ~(vis & ~near) & (batch.y_hat < 0.0)
    keep_obs = (vis & near) | interior | bool(local_min)
    return replace(
        batch,
        y=y,
        keep_obs=keep_obs,
        keep_pred=interior,
        vis=vis,
        near_cloud=near,
    )


def local_minimum(
    x_next: np.ndarray,
    x_saved: np.ndarray,
    window: int,
    d_min: float,
    dist_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> bool:
    """Stall test: average per-step, per-component travel since the
    saved state is strictly below d_min."""
    d = dist_fn or euclidean
    avg = float(np.mean(d(x_next, x_saved))) / float(window)
    return avg < d_min


def _append_dedup(points, labels, tags, mask, new_pts, new_labels, tag, masked):
    """Append rows, replacing the label of any existing point within
    DEDUP_TOL instead of growing. Goal seeds are never relabeled."""
    for p, lab, mk in zip(new_pts, new_labels, masked):
        if len(points):
            dist = np.linalg.norm(np.asarray(points) - p[None, :], axis=1)
            j = int(np.argmin(dist))
            if dist[j] <= DEDUP_TOL:
                if tags[j] != TAG_GOAL:
                    labels[j] = lab
                continue
        points.append(np.asarray(p, dtype=float))
        labels.append(float(lab))
        tags.append(int(tag))
        mask.append(bool(mk))


@dataclass(frozen=True)
class DatasetPair:
    """Memory and active point sets with stall masks.

    Entries are (point, label, tag); tags distinguish observed points,
    predicted points, and goal seeds. Updates return new instances; a
    snapshot handed to the refiner never changes under it.
    """

    mem_points: np.ndarray
    mem_labels: np.ndarray
    mem_tags: np.ndarray
    mem_mask: np.ndarray
    bar_points: np.ndarray
    bar_labels: np.ndarray
    bar_tags: np.ndarray
    bar_mask: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "DatasetPair":
        return cls(
            np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=int),
            np.zeros(0, dtype=bool),
            np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=int),
            np.zeros(0, dtype=bool),
        )

    @classmethod
    def seeded(cls, goals: np.ndarray) -> "DatasetPair":
        """Start a pair holding only the goal seeds (label 1, in both
        sets, never removable)."""
        goals = np.atleast_2d(np.asarray(goals, dtype=float))
        ones = np.ones(goals.shape[0])
        tags = np.full(goals.shape[0], TAG_GOAL)
        off = np.zeros(goals.shape[0], dtype=bool)
        return cls(goals.copy(), ones.copy(), tags.copy(), off.copy(),
                   goals.copy(), ones.copy(), tags.copy(), off.copy())

    def _lists(self, which: str):
        pre = "mem_" if which == "mem" else "bar_"
        return (
            [p for p in getattr(self, pre + "points")],
            [float(v) for v in getattr(self, pre + "labels")],
            [int(v) for v in getattr(self, pre + "tags")],
            [bool(v) for v in getattr(self, pre + "mask")],
        )

    def update(
        self,
        batch: LabelBatch,
        x_next: np.ndarray,
        x_pred: np.ndarray,
        local_min: bool,
    ) -> "DatasetPair":
        """Fold one pre-processed transition into both sets.

        Contact-kept observed points and interior predicted points go in
        unmasked; stall-kept observed points go in with the mask bit
        set. Predicted points are never added on a stall alone.
        """
        x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
        x_pred = np.atleast_2d(np.asarray(x_pred, dtype=float))
        contact_obs = (batch.vis & batch.near_cloud) | batch.keep_pred
        if local_min:
            take_obs = np.ones(len(batch.y), dtype=bool)
        else:
            take_obs = batch.keep_obs
        masked_obs = take_obs & ~contact_obs & bool(local_min)

        mem = self._lists("mem")
        bar = self._lists("bar")
        for dst in (mem, bar):
            _append_dedup(*dst, x_next[take_obs], batch.y[take_obs],
                          TAG_OBSERVED, masked_obs[take_obs])
            _append_dedup(*dst, x_pred[batch.keep_pred],
                          batch.y_hat[batch.keep_pred], TAG_PREDICTED,
                          np.zeros(int(batch.keep_pred.sum()), dtype=bool))
        return self._rebuild(mem, bar)

    def _rebuild(self, mem, bar) -> "DatasetPair":
        dim = self.mem_points.shape[1]
        def pack(rows):
            pts, labs, tags, mask = rows
            return (
                np.array(pts, dtype=float).reshape(len(pts), dim),
                np.array(labs, dtype=float),
                np.array(tags, dtype=int),
                np.array(mask, dtype=bool),
            )
        return DatasetPair(*pack(mem), *pack(bar))

    def purge_masked(self) -> "DatasetPair":
        """Drop every stall-injected entry from both sets."""
        km = ~self.mem_mask
        kb = ~self.bar_mask
        return DatasetPair(
            self.mem_points[km], self.mem_labels[km], self.mem_tags[km],
            self.mem_mask[km],
            self.bar_points[kb], self.bar_labels[kb], self.bar_tags[kb],
            self.bar_mask[kb],
        )

    def keep_bar(self, keep: np.ndarray) -> "DatasetPair":
        """Restrict the active set to the given boolean selection; the
        memory set is untouched."""
        keep = np.asarray(keep, dtype=bool)
        return DatasetPair(
            self.mem_points, self.mem_labels, self.mem_tags, self.mem_mask,
            self.bar_points[keep], self.bar_labels[keep], self.bar_tags[keep],
            self.bar_mask[keep],
        )

    @property
    def bar_size(self) -> int:
        return self.bar_points.shape[0]

    @property
    def mem_size(self) -> int:
        return self.mem_points.shape[0]
