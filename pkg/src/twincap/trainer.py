"""Training loop, evaluation, checkpointing and the ablation sweep."""

from __future__ import annotations

import json
import logging
import math
import shutil
from pathlib import Path

import numpy as np

from twincap import numerics as nx
from twincap.captioner import beam_search_steps, model_step_fn, teacher_forced_loss
from twincap.config import ABLATION_MODES, TrainConfig, parse_config
from twincap.metrics import corpus_scores, recall_at_k
from twincap.model import CaptionModel
from twincap.numerics import Tensor
from twincap.optim import AdamW, EarlyStopper, lr_at
from twincap.synthdata import Dataset, load_dataset, make_batch, spec_augment
from twincap.twin import NonFiniteLoss, contrastive_loss, sync, total_loss

log = logging.getLogger(__name__)

TRACKED_METRIC = "bleu4"


def split_dataset(ds: Dataset, num_val: int):
    n = len(ds)
    if num_val >= n:
        raise ValueError("num_val leaves no training samples")
    return ds.subset(np.arange(n - num_val)), ds.subset(np.arange(n - num_val, n))


def eval_points(steps_per_epoch: int, evals_per_epoch: int) -> list:
    """In-epoch step counts after which to evaluate: ceil(j * S / k) for j = 1..k."""
    pts = {math.ceil(j * steps_per_epoch / evals_per_epoch) for j in range(1, evals_per_epoch + 1)}
    return sorted(pts)


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset | None = None, run_dir=None):
        self.cfg = cfg
        if dataset is None:
            dataset = load_dataset(cfg.data)
        if dataset.spec.T != cfg.T or dataset.spec.D != cfg.D:
            raise ValueError(f"dataset shape (T={dataset.spec.T}, D={dataset.spec.D}) does not match config")
        self.dataset = dataset
        if cfg.num_val:
            self.train_ds, self.val_ds = split_dataset(dataset, cfg.num_val)
        else:
            self.train_ds, self.val_ds = dataset, None
        rng = np.random.default_rng(cfg.seed)
        self.model = CaptionModel(cfg, rng)
        self.aug_rng = np.random.default_rng([cfg.seed, 2])
        self.optimizers = {name: AdamW(m.parameters(), weight_decay=cfg.weight_decay)
                           for name, m in self.model.components().items()}
        n = len(self.train_ds)
        self.steps_per_epoch = math.ceil(n / cfg.batch_size)
        self.step = 0
        self.stopper = EarlyStopper(cfg.early_stop_patience)
        self.best_metric = -math.inf
        self.history = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
            (self.run_dir / "metrics.jsonl").write_text("", encoding="utf-8")

    # ------------------------------------------------------------------
    def _log(self, record: dict):
        self.history.append(record)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(len(self.train_ds))

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = self.epoch_order(epoch)
        bs = self.cfg.batch_size
        return order[k * bs:(k + 1) * bs]

    def lr(self, step: int) -> float:
        c = self.cfg
        return lr_at(step, self.steps_per_epoch, c.lr, c.cycle_epochs, c.halve_every)

    # ------------------------------------------------------------------
    def compute_losses(self, batch, augment: bool):
        cfg = self.cfg
        views = batch.views
        if augment and cfg.spec_augment:
            wt, wf = max(1, cfg.T // 8), max(1, cfg.D // 8)
            views = tuple(
                spec_augment(v, cfg.aug_time_masks, cfg.aug_feat_masks, wt, wf, self.aug_rng) for v in views
            )
        memory, a_state = self.model.audio_forward(views)
        ce = teacher_forced_loss(self.model.decoder, memory, batch.captions, cfg.label_smoothing)
        cl = None
        if cfg.twin:
            _, t_state = self.model.text_forward(batch.text_feat)
            cl = contrastive_loss(a_state.last_hidden, t_state.last_hidden, cfg.temperature)
        total = total_loss(ce, cl if cl is not None else 0.0)
        return ce, cl, total

    def train_step(self) -> dict:
        idx = self.batch_indices(self.step)
        batch = make_batch(self.train_ds, idx)
        self.model.train()
        ce, cl, total = self.compute_losses(batch, augment=True)
        nx.backward(total)
        lr = self.lr(self.step)
        for opt in self.optimizers.values():
            opt.step(lr)
        if self.model.twin is not None:
            sync(self.model.twin)
        rec = {
            "type": "train",
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "lr": lr,
            "loss_ce": float(ce.data),
            "loss_cl": float(cl.data) if cl is not None else 0.0,
            "loss_total": float(total.data),
        }
        self.step += 1
        self._log(rec)
        return rec

    # ------------------------------------------------------------------
    def embeddings(self, ds: Dataset, batch_size: int | None = None):
        """Audio and text last hidden states for every sample (twin mode)."""
        bs = batch_size or self.cfg.batch_size
        self.model.eval()
        ha, hc = [], []
        with nx.no_grad():
            for start in range(0, len(ds), bs):
                b = make_batch(ds, np.arange(start, min(start + bs, len(ds))))
                _, sa = self.model.audio_forward(b.views)
                _, sc = self.model.text_forward(b.text_feat)
                ha.append(sa.last_hidden.data)
                hc.append(sc.last_hidden.data)
        return np.concatenate(ha), np.concatenate(hc)

    def captions(self, ds: Dataset, num_beams: int | None = None, batch_size: int = 64):
        beams = num_beams or self.cfg.num_beams
        self.model.eval()
        out = []
        max_len = ds.captions.shape[1] - 1
        for start in range(0, len(ds), batch_size):
            b = make_batch(ds, np.arange(start, min(start + batch_size, len(ds))))
            with nx.no_grad():
                memory, _ = self.model.audio_forward(b.views)
            res = beam_search_steps(model_step_fn(self.model.decoder, memory), memory.shape[0],
                                    beams, max_len, 1, 2)
            out.extend(seq for seq, _ in res)
        return out

    def evaluate(self, ds: Dataset | None = None) -> dict:
        ds = ds if ds is not None else self.val_ds
        if ds is None or len(ds) == 0:
            raise ValueError("empty split")
        preds = self.captions(ds)
        strip = lambda seq: [t for t in seq if t > 2]  # noqa: E731
        cands = [strip(p) for p in preds]
        refs = [strip(list(c)) for c in ds.captions]
        scores = corpus_scores(cands, refs)
        scores["exact_match"] = float(np.mean([c == r for c, r in zip(cands, refs)]))
        if self.cfg.twin:
            scores.update(retrieval_scores(*self.embeddings(ds), self.cfg.batch_size))
        self.model.train()
        return scores

    # ------------------------------------------------------------------
    def fit(self, max_steps: int | None = None) -> dict:
        cfg = self.cfg
        cap = max_steps if max_steps is not None else (cfg.max_steps or None)
        points = eval_points(self.steps_per_epoch, cfg.evals_per_epoch)
        stopped_early = False
        while self.step < cfg.max_epochs * self.steps_per_epoch:
            if cap is not None and self.step >= cap:
                break
            try:
                rec = self.train_step()
            except NonFiniteLoss as exc:
                # parameters are untouched: the check runs before backward
                self._log({"type": "abort", "step": self.step, "reason": str(exc)})
                raise
            in_epoch = self.step - rec["epoch"] * self.steps_per_epoch
            if self.val_ds is not None and in_epoch in points:
                scores = self.evaluate()
                self._log({"type": "eval", "step": self.step, "epoch": rec["epoch"], **scores})
                if self.stopper.observe(scores[TRACKED_METRIC]):
                    self.best_metric = scores[TRACKED_METRIC]
                    self._save_best()
            if in_epoch == self.steps_per_epoch and self.val_ds is not None:
                if self.stopper.end_epoch():
                    stopped_early = True
                    break
        summary = {
            "steps": self.step,
            "best_" + TRACKED_METRIC: self.best_metric,
            "stopped_early": stopped_early,
            "tracked_metric": TRACKED_METRIC,
        }
        if self.run_dir is not None:
            self.save(self.run_dir / "last.npz")
            (self.run_dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return summary

    def _save_best(self):
        if self.run_dir is None:
            return
        path = self.run_dir / f"ckpt_step{self.step:06d}.npz"
        self.save(path)
        shutil.copyfile(path, self.run_dir / "best.npz")

    # ------------------------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = {}
        for name, mod in self.model.components().items():
            for pname, t in mod.parameters():
                arrays[f"param/{name}/{pname}"] = t.data
            for bname, b in mod.buffers().items():
                arrays[f"buffer/{name}/{bname}"] = b
            for k, a in self.optimizers[name].state().items():
                arrays[f"opt/{name}/{k}"] = a
        return arrays

    def save(self, path):
        meta = {
            "config": self.cfg.to_text(),
            "config_hash": self.cfg.digest(),
            "step": self.step,
            "best_metric": self.best_metric,
            "stopper": [self.stopper.best, self.stopper.bad_epochs, self.stopper._improved],
            "opt_t": {n: o.t for n, o in self.optimizers.items()},
            "aug_rng": self.aug_rng.bit_generator.state,
        }
        arrays = self.state_arrays()
        arrays["meta"] = np.array(json.dumps(meta, default=_json_default))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, dataset: Dataset | None = None, run_dir=None) -> "Trainer":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k] for k in z.files if k != "meta"}
        cfg = parse_config(meta["config"])
        tr = cls(cfg, dataset, run_dir)
        for name, mod in tr.model.components().items():
            pset = mod.parameters()
            pset.load_state({p: arrays[f"param/{name}/{p}"] for p in pset.names()})
            mod.load_buffers({b: arrays[f"buffer/{name}/{b}"] for b in mod.buffers()})
            opt = tr.optimizers[name]
            prefix = f"opt/{name}/"
            opt.load_state({k[len(prefix):]: a for k, a in arrays.items() if k.startswith(prefix)},
                           meta["opt_t"][name])
        tr.step = meta["step"]
        tr.best_metric = meta["best_metric"]
        tr.stopper.best, tr.stopper.bad_epochs, tr.stopper._improved = meta["stopper"]
        tr.aug_rng.bit_generator.state = meta["aug_rng"]
        return tr


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    raise TypeError(type(o))


def retrieval_scores(h_audio: np.ndarray, h_text: np.ndarray, batch_size: int) -> dict:
    """Split-level R@1/R@5 both directions, plus within-batch R@1 averaged over directions."""
    out = {
        "r1_a2t": recall_at_k(h_audio, h_text, 1),
        "r5_a2t": recall_at_k(h_audio, h_text, 5),
        "r1_t2a": recall_at_k(h_text, h_audio, 1),
        "r5_t2a": recall_at_k(h_text, h_audio, 5),
    }
    per_batch = []
    for start in range(0, len(h_audio), batch_size):
        a, c = h_audio[start:start + batch_size], h_text[start:start + batch_size]
        if len(a) < 2:
            continue
        per_batch.append(0.5 * (recall_at_k(a, c, 1) + recall_at_k(c, a, 1)))
    out["r1_batch"] = float(np.mean(per_batch))
    return out


def ablate(base_cfg: TrainConfig, dataset: Dataset, seeds=(0, 1, 2), out_dir=None, max_steps=None) -> dict:
    """Train every ablation mode for every seed; returns per-mode mean validation BLEU-4."""
    rows = []
    for mode in ABLATION_MODES:
        for seed in seeds:
            cfg = base_cfg.replace(ablation_mode=mode, seed=seed)
            run_dir = Path(out_dir) / f"{mode}_seed{seed}" if out_dir is not None else None
            tr = Trainer(cfg, dataset, run_dir)
            summary = tr.fit(max_steps=max_steps)
            rows.append({"mode": mode, "seed": seed, "bleu4": summary["best_bleu4"], "steps": summary["steps"]})
            log.info("ablation %s seed %d: bleu4 %.4f", mode, seed, summary["best_bleu4"])
    means = {m: float(np.mean([r["bleu4"] for r in rows if r["mode"] == m])) for m in ABLATION_MODES}
    result = {"rows": rows, "mean_bleu4": means}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True))
        (Path(out_dir) / "ablation.txt").write_text(format_ablation(result))
    return result


def format_ablation(result: dict) -> str:
    lines = [f"{'mode':<18}{'mean BLEU-4':>12}  per-seed"]
    for mode, mean in result["mean_bleu4"].items():
        per = ", ".join(f"{r['bleu4']:.4f}" for r in result["rows"] if r["mode"] == mode)
        lines.append(f"{mode:<18}{mean:>12.4f}  {per}")
    return "\n".join(lines) + "\n"
