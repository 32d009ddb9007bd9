"""Total loss, Adam with linear warmup, and the paired-sampling training loop."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bags import Bag, DatasetManifest
from .distill import PromptBank, build_prompt_bank, class_text_matrix, distill_loss, load_text_source
from .errors import DimensionError, NumericalError, SpecError
from .model import (
    AGGREGATORS,
    ENSEMBLE_MODES,
    FUSION_MODES,
    ModelBundle,
    ModelShape,
    PairOutputs,
    forward_pair,
    load_checkpoint,
    save_checkpoint,
)
from .samplers import BalancedSampler, UniformSampler, epoch_pairs

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lam: float = 0.25
    base_lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 50
    warmup_epochs: int = 2
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    ensemble: str = "shared"
    distillation: bool = True
    aggregator: str = "gated"
    fusion: str = "mean-softmax"
    embed_dim: int = 256
    attn_dim: int = 128
    ffn_dim: int = 256
    text_dim: int = 512
    template_len: int = 4
    class_token_len: int = 2
    logit_scale: float = 10.0
    text_seed: int = 0
    text_dir: Optional[str] = None
    accumulate: int = 1

    def validate(self) -> "TrainConfig":
        if self.alpha < 0 or self.lam < 0:
            raise SpecError(f"alpha and lambda must be >= 0, got {self.alpha}, {self.lam}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise SpecError(f"need epochs >= 1 and 0 <= warmup_epochs <= epochs, got {self.epochs}, {self.warmup_epochs}")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise SpecError("base_lr must be positive and weight_decay non-negative")
        if self.ensemble not in ENSEMBLE_MODES:
            raise SpecError(f"ensemble must be one of {ENSEMBLE_MODES}, got {self.ensemble!r}")
        if self.aggregator not in AGGREGATORS:
            raise SpecError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.fusion not in FUSION_MODES:
            raise SpecError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.logit_scale <= 0 or self.accumulate < 1 or not self.seeds:
            raise SpecError("logit_scale must be positive, accumulate >= 1, and at least one seed given")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecError(f"unknown config keys: {unknown}")
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d).validate()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:10]

    def model_shape(self, in_dim: int, num_classes: int) -> ModelShape:
        return ModelShape(
            in_dim=in_dim,
            num_classes=num_classes,
            embed_dim=self.embed_dim,
            attn_dim=self.attn_dim,
            ffn_dim=self.ffn_dim,
            text_dim=self.text_dim,
            aggregator=self.aggregator,
            ensemble=self.ensemble,
            distillation=self.distillation,
        )


# ------------------------------------------------------------------ loss


@dataclass
class LossParts:
    cls: float
    dis: float
    con: float
    total: float


def total_loss(
    outputs: PairOutputs,
    label_u: int,
    label_b: Optional[int],
    bundle: ModelBundle,
    bank: Optional[PromptBank],
    config: TrainConfig,
) -> Tuple[Tensor, LossParts]:
    """Classification + alpha * distillation + lambda * consistency, each averaged over the active branches."""
    two_branch = outputs.z_b is not None
    if two_branch:
        l_cls = ad.scalar_scale(
            ad.add(ad.cross_entropy(outputs.z_u, label_u), ad.cross_entropy(outputs.z_b, label_b)), 0.5
        )
        l_con = ad.scalar_scale(
            ad.add(ad.mse(outputs.z_u, outputs.z_u_cross), ad.mse(outputs.z_b, outputs.z_b_cross)), 0.5
        )
    else:
        l_cls = ad.cross_entropy(outputs.z_u, label_u)
        l_con = None

    l_dis = None
    if config.distillation:
        if bank is None or bundle.adaptor is None:
            raise SpecError("distillation is on but the bundle has no adaptor or prompt bank")
        text = class_text_matrix(bank)
        l_dis = distill_loss(bundle.adaptor(outputs.s_u), text, label_u, bundle.logit_scale)
        if two_branch:
            l_dis_b = distill_loss(bundle.adaptor(outputs.s_b), text, label_b, bundle.logit_scale)
            l_dis = ad.scalar_scale(ad.add(l_dis, l_dis_b), 0.5)

    for name, term in (("L_cls", l_cls), ("L_dis", l_dis), ("L_con", l_con)):
        if term is not None and not np.isfinite(term.item()):
            raise NumericalError(f"non-finite loss component {name} = {term.item()}")

    total = l_cls
    if l_dis is not None:
        total = ad.add(total, ad.scalar_scale(l_dis, config.alpha))
    if l_con is not None:
        total = ad.add(total, ad.scalar_scale(l_con, config.lam))
    parts = LossParts(
        cls=l_cls.item(),
        dis=l_dis.item() if l_dis is not None else 0.0,
        con=l_con.item() if l_con is not None else 0.0,
        total=total.item(),
    )
    if not math.isfinite(parts.total):
        raise NumericalError(f"non-finite L_total = {parts.total}")
    return total, parts


# ------------------------------------------------------------------ optimizer


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warmup epochs, constant afterwards."""
    warmup_steps = config.warmup_epochs * steps_per_epoch
    if warmup_steps <= 0 or step >= warmup_steps:
        return config.base_lr
    return config.base_lr * step / warmup_steps


@dataclass
class AdamState:
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Dict[str, Tensor],
    lr: float,
    weight_decay: float = 0.0,
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """Decoupled weight decay, then one bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------ log


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_dis: float
    l_con: float
    l_total: float
    lr: float
    wall_time: float


class TrainLog(list):
    CSV_HEADER = "epoch,L_cls,L_dis,L_con,L_total,lr"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.CSV_HEADER + "\n")
        for r in self:
            buf.write(f"{r.epoch},{r.l_cls!r},{r.l_dis!r},{r.l_con!r},{r.l_total!r},{r.lr!r}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "epochs": len(self),
            "first_total": self[0].l_total if self else None,
            "final_total": self[-1].l_total if self else None,
            "wall_time": sum(r.wall_time for r in self),
        }


# ------------------------------------------------------------------ fit


@dataclass
class FitResult:
    bundle: ModelBundle
    bank: Optional[PromptBank]
    log: TrainLog
    config: TrainConfig
    seed: int
    class_names: List[str]
    checkpoint: Optional[Path] = None

    def trainable(self) -> Dict[str, Tensor]:
        return trainable_parameters(self.bundle, self.bank)


def trainable_parameters(bundle: ModelBundle, bank: Optional[PromptBank]) -> Dict[str, Tensor]:
    params = dict(bundle.named_parameters())
    if bank is not None:
        params["prompt"] = bank.prompt
    return params


def build_model(
    in_dim: int, class_names: Sequence[str], config: TrainConfig, seed: int
) -> Tuple[ModelBundle, Optional[PromptBank], np.random.SeedSequence]:
    init_ss, sampler_ss = np.random.SeedSequence(seed).spawn(2)
    shape = config.model_shape(in_dim, len(class_names))
    bundle = ModelBundle(shape, np.random.default_rng(init_ss), logit_scale=config.logit_scale)
    bank = None
    if config.distillation:
        source = load_text_source(config.text_dir, config.text_dim, config.text_seed)
        bank = build_prompt_bank(source, config.template_len, class_names, config.class_token_len)
        if bank.prompt.shape[1] != config.text_dim:
            raise SpecError(f"text embeddings are {bank.prompt.shape[1]}-d but text_dim is {config.text_dim}")
    return bundle, bank, sampler_ss


def fit_bags(
    bags: Sequence[Bag],
    class_names: Sequence[str],
    config: TrainConfig,
    seed: int = 0,
) -> FitResult:
    """Train one bundle on in-memory bags with one (U, B) pair per iteration."""
    config.validate()
    if not bags:
        raise SpecError("no training bags")
    num_classes = len(class_names)
    in_dim = bags[0].dim
    for b in bags:
        if b.dim != in_dim:
            raise DimensionError(f"bag {b.id!r} is {b.dim}-d, expected {in_dim}")
        if b.label >= num_classes:
            raise SpecError(f"bag {b.id!r} label {b.label} outside {num_classes} classes")
    bundle, bank, sampler_ss = build_model(in_dim, class_names, config, seed)
    u_ss, b_ss = sampler_ss.spawn(2)
    labels = [b.label for b in bags]
    uniform = UniformSampler(labels, np.random.default_rng(u_ss))
    two_branch = config.ensemble != "none"
    balanced = BalancedSampler(labels, num_classes, np.random.default_rng(b_ss)) if two_branch else None
    inputs = [Tensor(b.embeddings) for b in bags]

    params = trainable_parameters(bundle, bank)
    ad.zero_grads(params.values())
    state = AdamState()
    k = config.accumulate
    steps_per_epoch = math.ceil(len(bags) / k)
    log = TrainLog()
    step = 0
    lr = lr_at(0, steps_per_epoch, config)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        pairs = epoch_pairs(uniform, balanced) if two_branch else ((int(i), None) for i in uniform.epoch())
        pending = 0
        for iu, ib in pairs:
            with Tape() as tape:
                out = forward_pair(bundle, inputs[iu], inputs[ib] if ib is not None else None)
                loss, parts = total_loss(out, labels[iu], labels[ib] if ib is not None else None, bundle, bank, config)
                tape.backward(loss, np.full((1, 1), 1.0 / k))
            sums += (parts.cls, parts.dis, parts.con, parts.total)
            pending += 1
            if pending == k:
                lr = lr_at(step, steps_per_epoch, config)
                adam_step(state, params, lr, config.weight_decay)
                ad.zero_grads(params.values())
                step += 1
                pending = 0
        if pending:
            lr = lr_at(step, steps_per_epoch, config)
            adam_step(state, params, lr, config.weight_decay)
            ad.zero_grads(params.values())
            step += 1
        means = sums / len(bags)
        log.append(EpochRecord(epoch + 1, *map(float, means), float(lr), time.perf_counter() - t0))
    return FitResult(bundle, bank, log, config, seed, list(class_names))


def fit(
    manifest: DatasetManifest,
    config: TrainConfig,
    seed: Optional[int] = None,
    out_dir=None,
) -> FitResult:
    """Train from a manifest; with ``out_dir`` also write the checkpoint and the CSV log."""
    seed = config.seeds[0] if seed is None else seed
    result = fit_bags(manifest.load_bags(), manifest.class_names, config, seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out_dir / "checkpoint.bin"
        save_fit(result, result.checkpoint)
        (out_dir / "train_log.csv").write_text(result.log.to_csv())
    return result


# ------------------------------------------------------------------ checkpoints


def save_fit(result: FitResult, path) -> None:
    arrays = result.bundle.state_dict()
    if result.bank is not None:
        arrays["prompt.S_PL"] = result.bank.prompt.data
        arrays["prompt.S_TP"] = result.bank.template
        for k, t in enumerate(result.bank.class_tokens):
            arrays[f"prompt.S_TC.{k}"] = t.data
    meta = {
        "format": "mde-checkpoint",
        "config": result.config.to_dict(),
        "seed": result.seed,
        "class_names": result.class_names,
        "in_dim": result.bundle.shape.in_dim,
    }
    save_checkpoint(path, arrays, meta)


def load_fit(path) -> FitResult:
    arrays, meta = load_checkpoint(path)
    if meta.get("format") != "mde-checkpoint":
        raise SpecError(f"{path}: not an mde-checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    names = list(meta["class_names"])
    shape = config.model_shape(int(meta["in_dim"]), len(names))
    bundle = ModelBundle(shape, np.random.default_rng(0), logit_scale=config.logit_scale)
    bundle.load_state_dict(arrays)
    bank = None
    if "prompt.S_PL" in arrays:
        bank = PromptBank(
            template=arrays["prompt.S_TP"].copy(),
            prompt=Tensor(arrays["prompt.S_PL"].copy(), requires_grad=True, name="prompt"),
            class_tokens=[Tensor(arrays[f"prompt.S_TC.{k}"].copy()) for k in range(len(names))],
            class_names=names,
        )
    return FitResult(bundle, bank, TrainLog(), config, int(meta["seed"]), names, Path(path))
