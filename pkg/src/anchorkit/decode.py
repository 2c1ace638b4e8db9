"""Inference decoding: baseline (decode everything) vs threshold-first.

Both paths softmax every anchor's logits; the baseline then converts
every anchor's offsets to boxes before filtering, while the improved
path first keeps only anchors whose face score exceeds ``score_threshold``
and converts offsets for those alone. With ``report_threshold >=
score_threshold`` the two paths produce identical detections; the
improved one just performs far fewer offset decodes, which
:func:`bench_decode` quantifies.

This is a CPU artifact: the benchmark isolates the offset-decode
workload reduction and deliberately does not model device-to-host
transfer costs.
"""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .assign import decode_rows, encode_targets  # noqa: F401  (encode used by bench fixture)
from .geometry import AnchorConfig, AnchorGrid, Box, generate_anchors
from .network import RawOutput

__all__ = [
    "DecodeConfig",
    "Detection",
    "DecodeResult",
    "face_scores",
    "nms",
    "decode_baseline",
    "decode_improved",
    "synth_raw_output",
    "BenchReport",
    "bench_decode",
    "write_detections",
    "read_detections",
]


@dataclass(frozen=True)
class DecodeConfig:
    """Decode-stage thresholds: score gate, NMS overlap, reporting floor."""

    score_threshold: float = 0.1  # keep anchors scoring strictly above this
    nms_threshold: float = 0.3  # suppress boxes overlapping a kept box above this
    report_threshold: float = 0.1
    max_detections: int = 200
    clip_to_image: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.score_threshold <= self.report_threshold < 1.0):
            raise ValueError(
                f"need 0 < score_threshold <= report_threshold < 1, got "
                f"{self.score_threshold} / {self.report_threshold}"
            )
        if not (0.0 < self.nms_threshold < 1.0):
            raise ValueError(f"nms_threshold must be in (0, 1), got {self.nms_threshold}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


@dataclass
class DecodeResult:
    """Final detections plus how many offset rows the path decoded."""

    detections: list[Detection]
    decode_ops: int


def face_scores(logits: np.ndarray) -> np.ndarray:
    """Softmax face-class probability per anchor, max-subtraction stabilized."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, 1] / e.sum(axis=1)


def _overlap_row(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    # IoU of one corner row against (M, 4) rows; zero-area rows get 0
    ix = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    iy = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    union = area + areas - inter
    return np.divide(inter, union, out=np.zeros_like(union), where=union > 0.0)


def nms_rows(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> np.ndarray:
    """Greedy suppression over corner rows; returns kept indices.

    Highest score first, ties toward the lower original index; every box
    overlapping a kept box strictly above ``thresh`` is dropped.
    """
    order = np.lexsort((np.arange(scores.size), -scores))
    kept: list[int] = []
    alive = np.ones(scores.size, dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        overlaps = _overlap_row(boxes[i], boxes[alive])
        drop = np.flatnonzero(alive)[overlaps > thresh]
        alive[drop] = False
    return np.asarray(kept, dtype=np.int64)


def nms(dets: Sequence[Detection], nms_threshold: float) -> list[Detection]:
    """Greedy NMS over Detection objects (see :func:`nms_rows`)."""
    if not dets:
        return []
    boxes = np.asarray([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.asarray([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in nms_rows(boxes, scores, nms_threshold)]


def _finalize(
    boxes: np.ndarray,
    scores: np.ndarray,
    anchor_indices: np.ndarray,
    cfg: DecodeConfig,
    image_w: int,
    image_h: int,
) -> list[Detection]:
    keep = scores >= cfg.report_threshold
    boxes, scores, anchor_indices = boxes[keep], scores[keep], anchor_indices[keep]
    if cfg.clip_to_image and boxes.size:
        boxes = boxes.copy()
        np.clip(boxes[:, 0::2], 0.0, image_w, out=boxes[:, 0::2])
        np.clip(boxes[:, 1::2], 0.0, image_h, out=boxes[:, 1::2])
        # boxes entirely outside the image collapse to zero extent; drop them
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores, anchor_indices = boxes[valid], scores[valid], anchor_indices[valid]
    if scores.size == 0:
        return []
    # order by score desc, ties by original anchor index, before suppression
    order = np.lexsort((anchor_indices, -scores))
    boxes, scores = boxes[order], scores[order]
    kept = nms_rows(boxes, scores, cfg.nms_threshold)[: cfg.max_detections]
    return [
        Detection(box=Box(*(float(v) for v in boxes[i])), score=float(scores[i]))
        for i in kept
    ]


def _check_raw(raw: RawOutput, grid: AnchorGrid) -> None:
    if len(raw) != len(grid):
        raise ValueError(f"raw output has {len(raw)} rows, grid has {len(grid)} anchors")


def decode_baseline(raw: RawOutput, grid: AnchorGrid, cfg: DecodeConfig | None = None) -> DecodeResult:
    """Decode every anchor's offsets, then filter, clip, and suppress."""
    cfg = cfg or DecodeConfig()
    _check_raw(raw, grid)
    scores = face_scores(np.asarray(raw.logits, dtype=np.float64))
    boxes = decode_rows(grid.boxes, np.asarray(raw.offsets, dtype=np.float64))
    dets = _finalize(
        boxes, scores, np.arange(len(grid)), cfg, grid.config.image_w, grid.config.image_h
    )
    return DecodeResult(detections=dets, decode_ops=len(grid))


def decode_improved(raw: RawOutput, grid: AnchorGrid, cfg: DecodeConfig | None = None) -> DecodeResult:
    """Score-gate first, then decode offsets only for the surviving anchors."""
    cfg = cfg or DecodeConfig()
    _check_raw(raw, grid)
    scores = face_scores(np.asarray(raw.logits, dtype=np.float64))
    selected = np.flatnonzero(scores > cfg.score_threshold)
    boxes = decode_rows(
        grid.boxes[selected], np.asarray(raw.offsets, dtype=np.float64)[selected]
    )
    dets = _finalize(
        boxes, scores[selected], selected, cfg, grid.config.image_w, grid.config.image_h
    )
    return DecodeResult(detections=dets, decode_ops=int(selected.size))


def _bench_grid(anchor_count: int) -> AnchorGrid:
    cfg = AnchorConfig()
    if cfg.anchor_count() == anchor_count:
        return generate_anchors(cfg)
    # single-layer grid factorized as rows x cols == anchor_count
    cols = max(1, int(math.isqrt(anchor_count)))
    while anchor_count % cols:
        cols -= 1
    rows = anchor_count // cols
    single = AnchorConfig(layers=((4, 16),), image_w=cols * 4, image_h=rows * 4)
    return generate_anchors(single)


def synth_raw_output(
    grid: AnchorGrid,
    hot_fraction: float,
    seed: int,
    score_threshold: float = 0.1,
    clusters: int = 8,
) -> RawOutput:
    """Seeded raw output with a controlled fraction of above-threshold anchors.

    Hot anchors score in (0.3, 0.99) and regress exactly onto a handful of
    shared target boxes (so suppression stays cheap and output-stable);
    cold anchors score well below the gate.
    """
    n = len(grid)
    rng = np.random.default_rng(seed)
    n_hot = int(round(hot_fraction * n))
    hot = rng.choice(n, size=n_hot, replace=False)
    hot.sort()

    probs = rng.uniform(0.002, min(0.05, score_threshold / 2), size=n)
    if n_hot:
        probs[hot] = rng.uniform(max(0.3, score_threshold * 2), 0.99, size=n_hot)
    logits = np.zeros((n, 2), dtype=np.float32)
    logits[:, 1] = np.log(probs / (1.0 - probs))

    offsets = rng.normal(0.0, 0.1, size=(n, 4)).astype(np.float32)
    if n_hot:
        w, h = grid.config.image_w, grid.config.image_h
        side = max(8.0, min(w, h) / 8.0)
        centers_x = rng.uniform(side, max(side + 1.0, w - side), size=clusters)
        centers_y = rng.uniform(side, max(side + 1.0, h - side), size=clusters)
        which = np.arange(n_hot) % clusters
        tx1 = centers_x[which] - side / 2
        ty1 = centers_y[which] - side / 2
        rows = grid.boxes[hot]
        aw = rows[:, 2] - rows[:, 0]
        ah = rows[:, 3] - rows[:, 1]
        acx = rows[:, 0] + aw / 2
        acy = rows[:, 1] + ah / 2
        offsets[hot, 0] = (tx1 + side / 2 - acx) / aw
        offsets[hot, 1] = (ty1 + side / 2 - acy) / ah
        offsets[hot, 2] = np.log(side / aw)
        offsets[hot, 3] = np.log(side / ah)
    return RawOutput(logits=logits, offsets=offsets)


@dataclass
class BenchReport:
    anchors: int
    hot_fraction: float
    repeats: int
    baseline_mean_ns: float
    baseline_stddev_ns: float
    improved_mean_ns: float
    improved_stddev_ns: float
    baseline_ops: int
    improved_ops: int
    outputs_equal: bool

    @property
    def speedup(self) -> float:
        return self.baseline_mean_ns / self.improved_mean_ns

    def to_csv(self, out: TextIO) -> None:
        out.write(
            "# decode-stage benchmark: measures the offset-decode workload "
            "reduction only; device-to-host transfer costs are not modeled\n"
        )
        out.write("path,anchors,hot_fraction,mean_ns,stddev_ns,decode_ops\n")
        out.write(
            f"baseline,{self.anchors},{self.hot_fraction:g},"
            f"{self.baseline_mean_ns:.0f},{self.baseline_stddev_ns:.0f},{self.baseline_ops}\n"
        )
        out.write(
            f"improved,{self.anchors},{self.hot_fraction:g},"
            f"{self.improved_mean_ns:.0f},{self.improved_stddev_ns:.0f},{self.improved_ops}\n"
        )


def bench_decode(
    anchor_count: int,
    hot_fraction: float,
    repeats: int = 50,
    seed: int = 0,
    warmup: int = 5,
    cfg: DecodeConfig | None = None,
) -> BenchReport:
    """Time both decode paths on a seeded synthetic raw output.

    Asserts on every repeat that the two paths agree detection-for-
    detection; timings are wall-clock (perf_counter_ns) after warmup.
    """
    if repeats < 10:
        raise ValueError(f"repeats must be >= 10, got {repeats}")
    cfg = cfg or DecodeConfig()
    grid = _bench_grid(anchor_count)
    raw = synth_raw_output(grid, hot_fraction, seed, score_threshold=cfg.score_threshold)

    for _ in range(warmup):
        decode_baseline(raw, grid, cfg)
        decode_improved(raw, grid, cfg)

    base_ns = np.empty(repeats)
    impr_ns = np.empty(repeats)
    equal = True
    base_ops = impr_ops = 0
    gc_was_on = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for r in range(repeats):
            # alternate measurement order so cache/scheduler drift hits both paths
            if r % 2 == 0:
                t0 = time.perf_counter_ns()
                rb = decode_baseline(raw, grid, cfg)
                t1 = time.perf_counter_ns()
                ri = decode_improved(raw, grid, cfg)
                t2 = time.perf_counter_ns()
                base_ns[r], impr_ns[r] = t1 - t0, t2 - t1
            else:
                t0 = time.perf_counter_ns()
                ri = decode_improved(raw, grid, cfg)
                t1 = time.perf_counter_ns()
                rb = decode_baseline(raw, grid, cfg)
                t2 = time.perf_counter_ns()
                impr_ns[r], base_ns[r] = t1 - t0, t2 - t1
            base_ops, impr_ops = rb.decode_ops, ri.decode_ops
            if rb.detections != ri.detections:
                equal = False
    finally:
        if gc_was_on:
            gc.enable()
    return BenchReport(
        anchors=len(grid),
        hot_fraction=hot_fraction,
        repeats=repeats,
        baseline_mean_ns=float(base_ns.mean()),
        baseline_stddev_ns=float(base_ns.std()),
        improved_mean_ns=float(impr_ns.mean()),
        improved_stddev_ns=float(impr_ns.std()),
        baseline_ops=base_ops,
        improved_ops=impr_ops,
        outputs_equal=equal,
    )


def write_detections(out: TextIO, per_image: Mapping[str, Iterable[Detection]]) -> None:
    """Emit the face-benchmark submission text format.

    Per image: a name line, a count line, then one ``x y w h score`` line
    per detection (6 significant digits).
    """
    for name in per_image:
        dets = list(per_image[name])
        out.write(f"{name}\n{len(dets)}\n")
        for d in dets:
            b = d.box
            out.write(
                f"{b.x1:.6g} {b.y1:.6g} {b.width:.6g} {b.height:.6g} {d.score:.6g}\n"
            )


def read_detections(text: str) -> dict[str, list[Detection]]:
    """Parse the submission text format written by :func:`write_detections`."""
    lines = text.splitlines()
    out: dict[str, list[Detection]] = {}
    i = 0
    while i < len(lines):
        name = lines[i].strip()
        if not name:
            i += 1
            continue
        if i + 1 >= len(lines):
            raise ValueError(f"line {i + 1}: missing detection count for {name!r}")
        try:
            count = int(lines[i + 1])
        except ValueError as e:
            raise ValueError(f"line {i + 2}: bad detection count {lines[i + 1]!r}") from e
        dets = []
        for j in range(count):
            idx = i + 2 + j
            if idx >= len(lines):
                raise ValueError(f"line {idx + 1}: truncated detections for {name!r}")
            parts = lines[idx].split()
            if len(parts) != 5:
                raise ValueError(f"line {idx + 1}: expected 'x y w h score', got {lines[idx]!r}")
            x, y, w, h, score = (float(v) for v in parts)
            dets.append(Detection(box=Box.from_xywh(x, y, w, h), score=score))
        out[name] = dets
        i += 2 + count
    return out
