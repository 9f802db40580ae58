"""Training loop, evaluation with a noise sweep, ablation grid and size audit.

Run configuration files hold one ``key = value`` pair per line; ``#`` starts
a comment. Keys are the :class:`RunConfig` field names, booleans accept
``true/false/1/0/on/off``. Command-line flags override file values.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import tensor_core as tc
from .blocks import count_params, mac_table, param_table
from .checkpoint import load_model, save_model
from .data import (ImageSet, imageset_from_manifest, imageset_from_samples, interval_subsample, load_manifest,
                   normalize_image, synth_generate)
from .em import EmConfig
from .errors import ConfigError, TrainingDivergedError
from .gam import ATTENTION_KINDS
from .head import angles_error_deg, mae_loss
from .model import EMNet

log = logging.getLogger(__name__)

PARAMS_TARGET = 2.93e6
PARAMS_BAND = 0.20
MACS_TARGET = 0.31e9
MACS_BAND = 0.25
EVAL_BATCH = 64


@dataclass
class RunConfig:
    attention: str = "gam"
    em: bool = True
    em_bases: int = 64
    em_iterations: int = 3
    em_temperature: float = 1.0
    image_size: int = 224
    lr: float = 5e-4
    lr_decay_epoch: int = 60
    lr_decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    # data: manifests win over synthetic generation when given
    train_manifest: str = ""
    eval_manifest: str = ""
    subsample: bool = False
    synth_seed: int = 0
    synth_train: int = 2000
    synth_eval: int = 500
    # "test" keeps training images clean; "train" adds N(0, train_sigma^2) to them
    noise_placement: str = "test"
    train_sigma: float = 0.0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.noise_placement not in ("test", "train"):
            raise ConfigError(f"noise_placement must be 'test' or 'train', got {self.noise_placement!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.lr < 0 or self.train_sigma < 0:
            raise ConfigError("lr and train_sigma must be non-negative")
        if self.image_size < 32:
            raise ConfigError(f"image_size {self.image_size} must be at least 32")

    def em_config(self) -> EmConfig:
        return EmConfig(num_bases=self.em_bases, iterations=self.em_iterations, temperature=self.em_temperature)

    def build_model(self) -> EMNet:
        return EMNet(self.attention, self.em, self.em_config() if self.em else None, self.image_size)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: step decay once ``lr_decay_epoch`` epochs are done."""
        return self.lr * (self.lr_decay_factor if epoch >= self.lr_decay_epoch else 1.0)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None, where: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{where}:{lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
            try:
                coerce_field(key, val)
            except ConfigError as e:
                raise ConfigError(f"{where}:{lineno}: {e}") from None
        return (base or cls()).with_overrides(values)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.parse(Path(path).read_text(), base, str(path))

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        return self.replace(**{k: coerce_field(k, v) for k, v in values.items()})


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce_field(key: str, val: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "on", "off", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "on", "yes")
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {val!r} as {kind}") from None
    return val


# -- data --------------------------------------------------------------------------------


def load_split(cfg: RunConfig, split: str) -> ImageSet:
    """Training or evaluation images for ``cfg``; synthetic splits use disjoint serial ranges."""
    manifest = cfg.train_manifest if split == "train" else cfg.eval_manifest
    if manifest:
        m = load_manifest(manifest)
        if split == "train" and cfg.subsample:
            m = interval_subsample(m)
        return imageset_from_manifest(m)
    if split == "train":
        samples = synth_generate(cfg.synth_train, cfg.synth_seed, 1, cfg.image_size)
    else:
        samples = synth_generate(cfg.synth_eval, cfg.synth_seed, cfg.synth_train + 1, cfg.image_size)
    images = imageset_from_samples(samples)
    if split == "train" and cfg.subsample:
        images = ImageSet(images.images[::2], images.labels[::2], images.serials[::2])
    return images


def to_input(imgs: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(normalize_image(imgs).astype(np.float32))
    return x.contiguous(memory_format=torch.channels_last)


def predict(model: EMNet, images: ImageSet, sigma: float = 0.0, noise_seed: int = 0,
            batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode (yaw, pitch) predictions, float64 [N, 2]."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                idx = np.arange(start, min(start + batch_size, len(images)))
                out.append(model(to_input(images.batch(idx, sigma, noise_seed))).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 2))


def mean_angular_error(model: EMNet, images: ImageSet, sigma: float = 0.0, noise_seed: int = 0) -> float:
    return float(angles_error_deg(predict(model, images, sigma, noise_seed), images.labels).mean())


# -- training ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: EMNet
    rows: list[dict]
    final_train_error: float
    final_eval_error: float
    checkpoint: Path
    out_dir: Path
    seconds: float = 0.0


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def train_loop(cfg: RunConfig, train: ImageSet | None = None, held_out: ImageSet | None = None,
               progress=None) -> TrainResult:
    """Adam on the mean absolute angle error; writes metrics.csv, final.csv, model.ckpt and run.cfg."""
    tc.configure_threads()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = train if train is not None else load_split(cfg, "train")
    held_out = held_out if held_out is not None else load_split(cfg, "eval")
    if len(train) < 2:
        raise ConfigError("training needs at least 2 samples")

    tc.seed_everything(cfg.seed)
    model = cfg.build_model().to(memory_format=torch.channels_last)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    labels = torch.from_numpy(train.labels)
    train_noise = cfg.train_sigma if cfg.noise_placement == "train" else 0.0
    rows = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        model.train()
        abs_sum, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            if len(idx) < 2:  # batch norm needs two samples
                continue
            x = to_input(train.batch(idx, train_noise, cfg.seed * 1000 + epoch))
            pred = model(x)
            loss = mae_loss(pred, labels[idx])
            if not torch.isfinite(loss):
                dump = out / "diverged_batch.txt"
                dump.write_text(f"epoch {epoch} batch {b}\nserials {' '.join(map(str, train.serials[idx]))}\n")
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}; batch dumped to {dump}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            abs_sum += loss.item() * len(idx) * 2
            count += len(idx) * 2
        row = {"epoch": epoch + 1, "lr": lr, "train_mae": abs_sum / max(count, 1),
               "eval_angular_error_deg": mean_angular_error(model, held_out)}
        rows.append(row)
        if progress:
            progress(row)
    final_train = mean_angular_error(model, train)
    final_eval = mean_angular_error(model, held_out)
    ckpt = out / "model.ckpt"
    save_model(ckpt, model)
    (out / "run.cfg").write_text(cfg.dumps())
    _write_csv(out / "metrics.csv", ["epoch", "lr", "train_mae", "eval_angular_error_deg"],
               [[r["epoch"], f"{r['lr']:.6g}", f"{r['train_mae']:.6f}", f"{r['eval_angular_error_deg']:.6f}"]
                for r in rows])
    _write_csv(out / "final.csv", ["metric", "value"],
               [["train_angular_error_deg", f"{final_train:.6f}"], ["eval_angular_error_deg", f"{final_eval:.6f}"],
                ["params", count_params(model)]])
    return TrainResult(model, rows, final_train, final_eval, ckpt, out, time.perf_counter() - t0)


def load_run(checkpoint, cfg: RunConfig | None = None) -> tuple[EMNet, RunConfig]:
    """Model from a checkpoint; the architecture comes from ``cfg`` or the run.cfg beside it."""
    checkpoint = Path(checkpoint)
    if cfg is None:
        side = checkpoint.with_name("run.cfg")
        cfg = RunConfig.load(side) if side.exists() else RunConfig()
    model = cfg.build_model()
    load_model(checkpoint, model)
    model.eval()
    return model, cfg


# -- evaluation --------------------------------------------------------------------------


def evaluate(model: EMNet, images: ImageSet, sigmas=(), noise_seed: int = 0) -> list[tuple[float, float, int]]:
    """(sigma, mean angular error in degrees, n) for the clean set and every sigma."""
    levels = [0.0] + [float(s) for s in sigmas if float(s) != 0.0]
    return [(s, mean_angular_error(model, images, s, noise_seed), len(images)) for s in levels]


def write_eval_csv(path, rows) -> None:
    _write_csv(Path(path), ["sigma", "mean_angular_error_deg", "n"], [[f"{s:g}", f"{e:.6f}", n] for s, e, n in rows])


def write_predictions(path, model: EMNet, images: ImageSet, sigma: float = 0.0, noise_seed: int = 0) -> None:
    pred = predict(model, images, sigma, noise_seed)
    err = angles_error_deg(pred, images.labels)
    _write_csv(Path(path), ["sample_id", "yaw_pred", "pitch_pred", "yaw_true", "pitch_true", "angular_error_deg"],
               [[int(s), f"{p[0]:.6f}", f"{p[1]:.6f}", f"{t[0]:.6f}", f"{t[1]:.6f}", f"{e:.6f}"]
                for s, p, t, e in zip(images.serials, pred, images.labels, err)])


def dump_attention(model: EMNet, images: ImageSet, out_dir, index: int = 0) -> list[Path]:
    """Attention matrices of every GAM pass for one sample, one text file per pass.

    Each block starts with ``# <module> window=<w> head=<h> rows=<n> cols=<n>``
    followed by ``n`` lines of ``n`` space-separated weights.
    """
    from .gam import GAM

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    passes = [(f"{name.split('.')[-1]}_{p}", getattr(mod, p)) for name, mod in model.named_modules()
              if isinstance(mod, GAM) for p in ("attn", "shifted_attn")]
    for _, wa in passes:
        wa.keep_attention = True
    try:
        predict(model, ImageSet(images.images[index:index + 1], images.labels[index:index + 1],
                                images.serials[index:index + 1]))
        written = []
        for tag, wa in passes:
            attn = wa.last_attention.double().numpy()
            lines = []
            for w in range(attn.shape[0]):
                for h in range(attn.shape[1]):
                    n = attn.shape[2]
                    lines.append(f"# {tag} window={w} head={h} rows={n} cols={n}")
                    lines += [" ".join(f"{v:.6e}" for v in row) for row in attn[w, h]]
            path = out / f"{tag}.txt"
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
        return written
    finally:
        for _, wa in passes:
            wa.keep_attention = False
            wa.last_attention = None


def dump_em_trace(model: EMNet, images: ImageSet, path, batch: int = 8) -> None:
    """EM objective after each iteration for the first ``batch`` samples: sample,iteration,value."""
    if model.em is None:
        raise ConfigError("model has no EM module")
    model.em.track = True
    try:
        n = min(batch, len(images))
        predict(model, ImageSet(images.images[:n], images.labels[:n], images.serials[:n]), batch_size=n)
        trace = model.em.last_state.objective_trace
    finally:
        model.em.track = False
    rows = [[int(images.serials[i]), t + 1, f"{float(trace[t][i]):.8e}"]
            for i in range(n) for t in range(len(trace))]
    _write_csv(Path(path), ["sample", "iteration", "value"], rows)


# -- ablation ------------------------------------------------------------------------------


ABLATION_GRID = (("gam", True), ("gam", False), ("none", True), ("none", False))


def variant_label(attention: str, em: bool) -> str:
    return f"{'GAM' if attention == 'gam' else 'no GAM'} + {'EM' if em else 'no EM'}"


def ablation_suite(cfg: RunConfig, progress=None, prior: dict | None = None) -> list[dict]:
    """Train the GAM x EM grid under one seed and budget; writes ablation.csv in cfg.out_dir.

    ``prior`` maps (attention, em) to a TrainResult already trained with the same budget;
    training is deterministic, so such a variant is reused rather than retrained.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, held_out = load_split(cfg, "train"), load_split(cfg, "eval")
    rows = []
    for attention, em in ABLATION_GRID:
        sub = cfg.replace(attention=attention, em=em, out_dir=str(out / f"{attention}_{'em' if em else 'noem'}"))
        res = (prior or {}).get((attention, em))
        if res is None:
            res = train_loop(sub, train, held_out, progress)
        rows.append({"variant": variant_label(attention, em), "attention": attention, "em": em,
                     "params": count_params(res.model), "eval_angular_error_deg": res.final_eval_error,
                     "run_dir": str(res.out_dir), "seconds": res.seconds})
    _write_csv(out / "ablation.csv", ["variant", "gam", "em", "params", "eval_angular_error_deg"],
               [[r["variant"], "on" if r["attention"] == "gam" else "off", "on" if r["em"] else "off", r["params"],
                 f"{r['eval_angular_error_deg']:.6f}"] for r in rows])
    full, double = rows[0]["eval_angular_error_deg"], rows[-1]["eval_angular_error_deg"]
    singles = [r["eval_angular_error_deg"] for r in rows[1:3]]
    log.info("ablation ordering: full <= singles %s, double worst %s",
             all(full <= s for s in singles), all(double > e for e in [full] + singles))
    return rows


# -- audit -----------------------------------------------------------------------------------


@dataclass
class AuditReport:
    layers: list[tuple[str, int, int]]  # module, params, MACs
    total_params: int
    total_macs: int
    params_ok: bool = False
    macs_ok: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return 2 * self.total_macs

    @property
    def ok(self) -> bool:
        return self.params_ok and self.macs_ok

    def to_text(self) -> str:
        lines = [f"{'module':<48}{'params':>12}{'MACs':>16}"]
        lines += [f"{m:<48}{p:>12}{c:>16}" for m, p, c in self.layers]
        lines.append(f"{'total':<48}{self.total_params:>12}{self.total_macs:>16}")
        lines.append(f"params {self.total_params / 1e6:.3f}M vs {PARAMS_TARGET / 1e6:.2f}M +/-{PARAMS_BAND:.0%}: "
                     f"{'PASS' if self.params_ok else 'FAIL'}")
        lines.append(f"MACs {self.total_macs / 1e9:.3f}G (FLOPs as 2xMAC {self.flops / 1e9:.3f}G) vs "
                     f"{MACS_TARGET / 1e9:.2f}G +/-{MACS_BAND:.0%}: {'PASS' if self.macs_ok else 'FAIL'}")
        return "\n".join(lines + self.notes) + "\n"


def audit(attention: str = "gam", em: bool = True, input_size: int = 224) -> AuditReport:
    """Per-module parameter and MAC counts compared with the reference size of the full model."""
    torch.manual_seed(0)
    model = EMNet(attention, em, input_size=input_size)
    params = dict(param_table(model))
    macs: dict[str, int] = {}
    for name, m in mac_table(model, (1, 3, input_size, input_size)):
        macs[name] = macs.get(name, 0) + m
    names = [n for n, _ in model.named_modules() if n in params or n in macs]
    layers = [(n, params.get(n, 0), macs.get(n, 0)) for n in names]
    total_p = count_params(model)
    total_m = sum(macs.values())
    rep = AuditReport(layers, total_p, total_m)
    rep.params_ok = abs(total_p - PARAMS_TARGET) <= PARAMS_BAND * PARAMS_TARGET
    rep.macs_ok = abs(total_m - MACS_TARGET) <= MACS_BAND * MACS_TARGET
    if sum(p for _, p, _ in layers) != total_p or sum(c for _, _, c in layers) != total_m:
        rep.notes.append("per-layer sums do not reconcile with totals")
        rep.params_ok = rep.macs_ok = False
    return rep


def write_audit_csv(path, rep: AuditReport) -> None:
    _write_csv(Path(path), ["module", "params", "macs"],
               [list(r) for r in rep.layers] + [["total", rep.total_params, rep.total_macs]])
