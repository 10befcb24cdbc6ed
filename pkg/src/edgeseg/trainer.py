"""AdamW training loop, evaluation, lambda sweep and EF/EG ablation harnesses.

Randomness comes from one root seed split into named streams: ``init`` for
parameter initialisation, ``data`` for batch order and ``augment`` for crops and
flips. Every step derives its own generator from (seed, stream, step) so a run
resumed from a checkpoint follows the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import ModelConfig, RunConfig, TrainConfig
from .decoder_loss import derive_box_mask, joint_loss, predict_mask
from .imaging import canny
from .metrics import Evaluator, MetricReport
from .model import EdgeAwareSegmenter, images_to_tensor, raw_edges
from .numerics import load_tensors, no_grad, save_tensors
from .synth import Dataset

STREAMS = {"init": 0, "data": 1, "augment": 2}
DEFAULT_LAMBDAS = (0.1, 0.5, 1.0, 5.0, 10.0)
ABLATION_ROWS = (("(.,.)", False, False), ("EF", True, False), ("EG", False, True), ("EF+EG", True, True))


class NumericError(ArithmeticError):
    """A loss term became NaN or infinite."""


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


def build_model(cfg: ModelConfig, seed: int) -> EdgeAwareSegmenter:
    return EdgeAwareSegmenter(cfg, stream(seed, "init"))


class AdamW:
    """Adam with decoupled weight decay: p <- p*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, named_params, lr: float, weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data *= 1.0 - self.lr * self.wd
            p.data -= (self.lr * update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m/{k}": v for k, v in self.m.items()}
        out.update({f"opt.v/{k}": v for k, v in self.v.items()})
        out["opt.step"] = np.array(float(self.t))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"opt.m/{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state[f"opt.v/{k}"], dtype=self.params[k].data.dtype)
        self.t = int(state["opt.step"])


def clip_grad_norm(params: Iterable, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# -- batches ------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step``: walks a per-epoch permutation of the data."""
    start = step * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n)
        out.append(stream(seed, "data", epoch).permutation(n)[offset])
    return np.array(out, dtype=int)


def augment(image, text, rng: np.random.Generator, crop: bool, flip: bool, pad: int):
    """Random crop of the reflect-padded sample back to its size, then random h-flip."""
    h, w = text.shape
    if crop and pad > 0:
        spec = ((pad, pad), (pad, pad))
        img_p = np.pad(image, spec + ((0, 0),), mode="reflect")
        txt_p = np.pad(text, spec, mode="reflect")
        y, x = rng.integers(0, 2 * pad + 1, size=2)
        image, text = img_p[y:y + h, x:x + w], txt_p[y:y + h, x:x + w]
    if flip and rng.random() < 0.5:
        image, text = image[:, ::-1], text[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(text)


class BatchSource:
    """Deterministic batches; Canny is recomputed whenever augmentation changed the image."""

    def __init__(self, data: Dataset, cfg: RunConfig):
        self.data, self.cfg = data, cfg
        self.augmenting = cfg.train.augment_crop or cfg.train.augment_flip
        self._edges = None

    def _static_edges(self) -> np.ndarray:
        if self._edges is None:
            self._edges = raw_edges(self.data.images, self.cfg.model)
        return self._edges

    def get(self, step: int):
        tc, mc = self.cfg.train, self.cfg.model
        idx = batch_indices(len(self.data), tc.batch_size, tc.seed, step)
        if not self.augmenting:
            return (self.data.images[idx], self._static_edges()[idx],
                    self.data.text_masks[idx], self.data.area_masks[idx])
        rng = stream(tc.seed, "augment", step)
        pad = max(1, self.data.images.shape[1] // 8)
        imgs, edges, texts, areas = [], [], [], []
        for i in idx:
            img, txt = augment(self.data.images[i], self.data.text_masks[i], rng,
                               tc.augment_crop, tc.augment_flip, pad)
            imgs.append(img)
            texts.append(txt)
            areas.append(derive_box_mask(txt))
            edges.append(canny(img, mc.canny_low, mc.canny_high))
        return np.stack(imgs), np.stack(edges), np.stack(texts), np.stack(areas)


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: EdgeAwareSegmenter
    optimizer: AdamW
    history: list = field(default_factory=list)       # (step, seg, det, total)
    seconds: float = 0.0

    def summary(self) -> dict:
        last = self.history[-1] if self.history else (0, math.nan, math.nan, math.nan)
        return {"steps": self.optimizer.t, "final": {"seg": last[1], "det": last[2], "total": last[3]},
                "parameters": self.model.num_parameters(), "seconds": round(self.seconds, 3)}


def format_log_line(step: int, seg: float, det: float, total: float) -> str:
    return f"{step} {seg:.9g} {det:.9g} {total:.9g}"


def checkpoint_state(model, opt: AdamW) -> dict[str, np.ndarray]:
    state = {f"param/{k}": v for k, v in model.state_dict().items()}
    state.update(opt.state())
    return state


def save_checkpoint(path, cfg: RunConfig, model, opt: AdamW) -> None:
    path = Path(path)
    save_tensors(path, checkpoint_state(model, opt))
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[RunConfig, EdgeAwareSegmenter, AdamW]:
    from .config import config_from_dict

    path = Path(path)
    meta = path.with_suffix(path.suffix + ".json")
    try:
        cfg = config_from_dict(json.loads(meta.read_text()))
    except OSError as exc:
        raise IOError(f"{meta}: cannot read checkpoint config ({exc.strerror})") from exc
    state = load_tensors(path)
    model = build_model(cfg.model, cfg.train.seed)
    model.load_state_dict({k[len("param/"):]: v for k, v in state.items() if k.startswith("param/")})
    tc = cfg.train
    opt = AdamW(model.named_parameters(), tc.learning_rate, tc.weight_decay, tc.beta1, tc.beta2, tc.eps)
    if "opt.step" in state:
        opt.load_state(state)
    return cfg, model, opt


def train(data: Dataset, cfg: RunConfig, model: EdgeAwareSegmenter | None = None, opt: AdamW | None = None,
          log: Callable[[str], None] | None = None, out_dir=None, steps: int | None = None) -> TrainResult:
    """Train for ``cfg.train.max_steps`` optimizer steps (or ``steps`` more, when resuming).

    Pass ``model``/``opt`` from :func:`load_checkpoint` to resume. ``log`` gets
    one ``step seg det total`` line per step; with ``out_dir`` checkpoints are
    written every ``checkpoint_every`` steps and at the end.
    """
    cfg.validate()
    tc = cfg.train
    if data.images.shape[1:3] != (cfg.model.image_size, cfg.model.image_size):
        raise ValueError(f"data is {data.images.shape[1]}x{data.images.shape[2]}, "
                         f"model expects {cfg.model.image_size}x{cfg.model.image_size}")
    model = model or build_model(cfg.model, tc.seed)
    opt = opt or AdamW(model.named_parameters(), tc.learning_rate, tc.weight_decay, tc.beta1, tc.beta2, tc.eps)
    source = BatchSource(data, cfg)
    result = TrainResult(model, opt)
    end = opt.t + steps if steps is not None else tc.max_steps
    t0 = time.perf_counter()
    while opt.t < end:
        step = opt.t
        imgs, edges, texts, areas = source.get(step)
        model.zero_grad()
        out = model(images_to_tensor(imgs), edges if model.uses_edges else None)
        loss, rep = joint_loss(out["seg_logits"], out["det_logits"], texts, areas, tc.lam)
        for term in ("seg", "det", "total"):
            if not math.isfinite(getattr(rep, term)):
                raise NumericError(f"non-finite {term} loss ({getattr(rep, term)}) at step {step}")
        loss.backward()
        if tc.grad_clip > 0:
            clip_grad_norm(model.parameters(), tc.grad_clip)
        opt.step()
        result.history.append((step, rep.seg, rep.det, rep.total))
        if log is not None:
            log(format_log_line(step, rep.seg, rep.det, rep.total))
        if out_dir is not None and tc.checkpoint_every > 0 and opt.t % tc.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"step_{opt.t:06d}.ckpt", cfg, model, opt)
    result.seconds = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.ckpt", cfg, model, opt)
    return result


# -- evaluation ---------------------------------------------------------------


def predict(model: EdgeAwareSegmenter, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            imgs = images[i:i + batch_size]
            edges = raw_edges(imgs, model.cfg) if model.uses_edges else None
            preds.append(predict_mask(model(images_to_tensor(imgs), edges)["seg_logits"]))
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[1:3], bool)


def evaluate(model: EdgeAwareSegmenter, data: Dataset, band_radius: int | None = None) -> MetricReport:
    ev = Evaluator(band_radius)
    ev.update(predict(model, data.images), data.text_masks)
    return ev.report()


# -- harnesses ----------------------------------------------------------------


def _variant(cfg: RunConfig, **changes) -> RunConfig:
    new = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        section, key = dotted.split("__")
        setattr(getattr(new, section), key, value)
    return new.validate()


@dataclass
class TableRow:
    label: str
    fgIoU: float
    f_score: float
    edge_fgIoU: float
    per_seed: list = field(default_factory=list)   # [(seed, fgIoU, F, edge_fgIoU)]


def _mean_row(label: str, reports: list[tuple[int, MetricReport]]) -> TableRow:
    per = [(s, r.fgIoU, r.f_score, r.edge_fgIoU if r.edge_fgIoU is not None else math.nan) for s, r in reports]
    arr = np.array([p[1:] for p in per], dtype=float)
    return TableRow(label, *map(float, arr.mean(axis=0)), per_seed=per)


def lambda_sweep(train_data: Dataset, test_data: Dataset, cfg: RunConfig, values=DEFAULT_LAMBDAS,
                 log: Callable[[str], None] | None = None) -> list[TableRow]:
    """One model per lambda, shared seed; rows in the order of ``values``."""
    values = list(values)
    if not values:
        raise ValueError("lambda sweep needs at least one value")
    rows = []
    for lam in values:
        run = _variant(cfg, train__lam=float(lam))
        res = train(train_data, run)
        rep = evaluate(res.model, test_data)
        rows.append(_mean_row(f"{lam:g}", [(run.train.seed, rep)]))
        if log:
            log(f"lambda={lam:g} fgIoU={rep.fgIoU:.2f} F={rep.f_score:.3f}")
    return rows


def ablation_run(train_data: Dataset, test_data: Dataset, cfg: RunConfig, seeds=(0, 1, 2),
                 log: Callable[[str], None] | None = None) -> list[TableRow]:
    """The four EF x EG cells, each the mean over ``seeds``; ordered (.,.), EF, EG, EF+EG."""
    rows = []
    for label, ef, eg in ABLATION_ROWS:
        reports = []
        for seed in seeds:
            run = _variant(cfg, model__edge_filtering=ef, model__edge_guidance=eg, train__seed=int(seed))
            res = train(train_data, run)
            rep = evaluate(res.model, test_data)
            reports.append((int(seed), rep))
            if log:
                log(f"{label} seed={seed} fgIoU={rep.fgIoU:.2f} F={rep.f_score:.3f} edge_fgIoU={rep.edge_fgIoU:.2f}")
        rows.append(_mean_row(label, reports))
    return rows


def format_table(rows: list[TableRow], first: str) -> str:
    lines = [f"{first:>8} {'fgIoU':>8} {'F':>7} {'edge_fgIoU':>11}"]
    for r in rows:
        lines.append(f"{r.label:>8} {r.fgIoU:8.2f} {r.f_score:7.3f} {r.edge_fgIoU:11.2f}")
    return "\n".join(lines) + "\n"


def rows_to_json(rows: list[TableRow]) -> str:
    return json.dumps([dataclasses.asdict(r) for r in rows], indent=2)
