"""Two-stage training: separate MPN / RIN pretraining, then joint adversarial fine-tuning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import synth
from .errors import ConfigError, TrainingFault
from .losses import LossWeights, RandomFeaturePyramid, disc_loss_gp, joint_objective, self_adaptive_bce, total_gen_loss
from .metrics import eval_bce, psnr, ssim, to_unit
from .networks import (
    MPN,
    RIN,
    Discriminator,
    NetConfig,
    build_models,
    json_tensor,
    load_checkpoint,
    model_tensors,
    models_from_tensors,
    save_checkpoint,
    tensor_json,
)

log = logging.getLogger(__name__)

STAGES = ("mpn", "rin", "joint")
LOG_KEYS = ("L_m", "L_recon", "L_sem", "L_mrf", "L_adv", "L_D", "gp")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "mpn"
    steps: int = 1000
    batch_size: int = 4
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.9
    seed: int = 0
    weights: LossWeights = LossWeights()
    net: NetConfig = NetConfig()
    data: str = ""
    out: str = ""
    snapshot_every: int = 0
    history: int = 256
    extractor_seed: int = 1234

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.net.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["net"] = NetConfig(**d.get("net", {}))
        return cls(**d)


# Config-file keys that live on nested dataclasses.
_WEIGHT_KEYS = {
    "lambda_r": "recon", "lambda_s": "semantic", "lambda_f": "mrf",
    "lambda_a": "adv", "lambda_gp": "gp", "lambda_m": "mask",
}


def _coerce(value: str, kind):
    kind = {"int": int, "float": float, "str": str}.get(kind, kind)
    return kind(value)


def parse_config(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments) over ``base``.

    Top-level keys are :class:`TrainConfig` fields, ``lambda_*`` set loss
    weights and ``net.<field>`` sets network fields.
    """
    top = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    net_fields = {f.name: f.type for f in dataclasses.fields(NetConfig)}
    updates, weights, net = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _WEIGHT_KEYS:
                weights[_WEIGHT_KEYS[key]] = float(value)
            elif key.startswith("net."):
                name = key[4:]
                if name not in net_fields:
                    raise ConfigError(f"line {lineno}: unknown network key {name!r}")
                net[name] = _coerce(value, net_fields[name])
            elif key in top and key not in ("weights", "net"):
                updates[key] = _coerce(value, top[key])
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    cfg = dataclasses.replace(
        base,
        weights=dataclasses.replace(base.weights, **weights),
        net=dataclasses.replace(base.net, **net),
        **updates,
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path, base: TrainConfig = TrainConfig()) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class Batch(NamedTuple):
    degraded: Tensor
    truth: Tensor
    mask: Tensor
    soft_mask: Tensor

    def __len__(self):
        return self.degraded.shape[0]

    def take(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(*(t.index_select(0, idx) for t in self))


def _nchw(a: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float32), -1, -3)))


def batch_from_tuples(tuples: Sequence[synth.TrainingTuple]) -> Batch:
    stacked = synth.stack_tuples(tuples)
    return Batch(_nchw(stacked.degraded), _nchw(stacked.truth), _nchw(stacked.mask), _nchw(stacked.soft_mask))


def procedural_dataset(count: int, size: int, seed: int = 0) -> Batch:
    """``count`` synthetic tuples built from procedural truth and noise images."""
    tuples = []
    for i in range(count):
        s = synth.sample_seed(seed, i)
        truth = synth.procedural_image(s, size, size)
        noise = synth.procedural_image(s + 1, size, size)
        tuples.append(synth.make_training_tuple(truth, noise, seed=s))
    return batch_from_tuples(tuples)


def read_manifest(root: str | Path) -> list[dict]:
    with open(Path(root) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(root: str | Path) -> Batch:
    """Load every tuple listed in ``<root>/manifest.jsonl`` (images from ``<root>/images``)."""
    root = Path(root)
    images = root / "images"
    deg, tru, msk, soft = [], [], [], []
    for rec in read_manifest(root):
        i = rec["id"]
        deg.append(_load_rgb(images / f"{i}_I.png"))
        tru.append(_load_rgb(images / f"{i}_O.png"))
        msk.append((synth.load_mask(images / f"{i}_M.png") > 0.5).astype(np.float32))
        soft.append(synth.load_mask(images / f"{i}_Msoft.png"))
    if not deg:
        raise ValueError(f"empty dataset at {root}")
    return Batch(_nchw(np.stack(deg)), _nchw(np.stack(tru)), _nchw(np.stack(msk)), _nchw(np.stack(soft)))


def _load_rgb(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return synth.to_signed(np.asarray(im.convert("RGB")))


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Indices of the ``step``-th batch in a stream of per-epoch permutations.

    Epoch ``e`` is ``permutation(n)`` drawn from ``(seed, e)``; batches are
    consecutive slices of the concatenated stream, so any step can be
    assembled without replaying earlier ones.
    """
    start = step * batch
    out = []
    for pos in range(start, start + batch):
        epoch, offset = divmod(pos, n)
        out.append(_epoch_perm(n, seed, epoch)[offset])
    return np.asarray(out, dtype=np.int64)


_perm_cache: dict[tuple[int, int, int], np.ndarray] = {}


def _epoch_perm(n: int, seed: int, epoch: int) -> np.ndarray:
    key = (n, seed, epoch)
    if key not in _perm_cache:
        if len(_perm_cache) > 4096:
            _perm_cache.clear()
        _perm_cache[key] = np.random.default_rng([seed, epoch]).permutation(n)
    return _perm_cache[key]


def iterate_dataset(data: Batch, batch: int, seed: int, start_step: int = 0) -> Iterator[Batch]:
    step = start_step
    while True:
        yield data.take(batch_indices(len(data), batch, seed, step))
        step += 1


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


def _adam(params, lr: float, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2))


@dataclass
class TrainState:
    cfg: TrainConfig
    mpn: MPN
    rin: RIN
    disc: Discriminator
    opt_mpn: torch.optim.Adam
    opt_rin: torch.optim.Adam
    opt_d: torch.optim.Adam
    generator: torch.Generator
    step: int = 0
    history: deque = field(default_factory=deque)
    extractor: nn.Module | None = None

    def __post_init__(self):
        if self.extractor is None:
            self.extractor = RandomFeaturePyramid(self.cfg.net.in_channels, seed=self.cfg.extractor_seed)
        if not isinstance(self.history, deque) or self.history.maxlen != self.cfg.history:
            self.history = deque(self.history, maxlen=self.cfg.history)

    @property
    def optimizers(self) -> dict[str, torch.optim.Adam]:
        return {"opt_mpn": self.opt_mpn, "opt_rin": self.opt_rin, "opt_d": self.opt_d}

    def use_config(self, cfg: TrainConfig) -> None:
        """Adopt a new stage config, keeping weights and optimizer moments."""
        if cfg.net != self.cfg.net:
            raise ConfigError("network configuration differs from the warm state")
        self.cfg = cfg
        self.history = deque(self.history, maxlen=cfg.history)
        for opt, lr in ((self.opt_mpn, cfg.lr_g), (self.opt_rin, cfg.lr_g), (self.opt_d, cfg.lr_d)):
            for group in opt.param_groups:
                group["lr"] = lr
                group["betas"] = (cfg.beta1, cfg.beta2)


def new_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    mpn, rin, disc = build_models(cfg.net, seed=cfg.seed)
    return TrainState(
        cfg=cfg,
        mpn=mpn,
        rin=rin,
        disc=disc,
        opt_mpn=_adam(mpn.parameters(), cfg.lr_g, cfg),
        opt_rin=_adam(rin.parameters(), cfg.lr_g, cfg),
        opt_d=_adam(disc.parameters(), cfg.lr_d, cfg),
        generator=torch.Generator().manual_seed(cfg.seed),
    )


def state_tensors(state: TrainState) -> dict[str, Tensor]:
    tensors = model_tensors(state.mpn, state.rin, state.disc)
    tensors["meta.train"] = json_tensor(state.cfg.to_dict())
    tensors["state.step"] = torch.tensor([state.step], dtype=torch.int64)
    tensors["state.rng"] = state.generator.get_state()
    tensors["state.history"] = json_tensor(list(state.history))
    for name, opt in state.optimizers.items():
        for idx, slots in sorted(opt.state_dict()["state"].items()):
            for key, value in slots.items():
                tensors[f"{name}.{idx}.{key}"] = torch.as_tensor(value)
    return tensors


def state_from_tensors(tensors: dict[str, Tensor]) -> TrainState:
    cfg = TrainConfig.from_dict(tensor_json(tensors["meta.train"]))
    state = new_state(cfg)
    mpn, rin, disc = models_from_tensors(tensors)
    state.mpn.load_state_dict(mpn.state_dict())
    state.rin.load_state_dict(rin.state_dict())
    state.disc.load_state_dict(disc.state_dict())
    for name, opt in state.optimizers.items():
        slots: dict[int, dict[str, Tensor]] = {}
        prefix = name + "."
        for key, value in tensors.items():
            if key.startswith(prefix):
                idx, slot = key[len(prefix):].split(".", 1)
                slots.setdefault(int(idx), {})[slot] = value.clone()
        if slots:
            opt.load_state_dict({"state": slots, "param_groups": opt.state_dict()["param_groups"]})
    state.step = int(tensors["state.step"][0])
    state.generator.set_state(tensors["state.rng"].clone())
    state.history = deque(tensor_json(tensors["state.history"]), maxlen=cfg.history)
    return state


def save_state(path: str | Path, state: TrainState) -> None:
    save_checkpoint(path, state_tensors(state))


def load_state(path: str | Path) -> TrainState:
    return state_from_tensors(load_checkpoint(path))


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


class JsonlLog:
    """Appends one JSON record per step to ``train_log.jsonl``."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _record(step: int, **values) -> dict:
    rec = {"step": step}
    for key in LOG_KEYS:
        v = values.get(key)
        rec[key] = None if v is None else float(v)
    return rec


def _fault(state: TrainState, what: str, record: dict) -> TrainingFault:
    where = ""
    if state.cfg.out:
        path = Path(state.cfg.out) / f"fault_step{state.step:06d}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_state(path, state)
        where = f"; snapshot at {path}"
    return TrainingFault(f"non-finite {what} at step {state.step}: {record}{where}")


def _check(state: TrainState, record: dict) -> None:
    for key in LOG_KEYS:
        v = record[key]
        if v is not None and not math.isfinite(v):
            raise _fault(state, key, record)


def _backward_step(loss: Tensor, *opts: torch.optim.Optimizer) -> None:
    for opt in opts:
        opt.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    for opt in opts:
        opt.step()


def _critic_step(state: TrainState, fake: Tensor, real: Tensor) -> tuple[float | None, float | None]:
    w = state.cfg.weights
    if not w.adv:
        return None, None
    d = disc_loss_gp(state.disc, fake.detach(), real, w.gp, generator=state.generator)
    if not torch.isfinite(d.total):
        raise _fault(state, "critic loss", {"L_D": d.total.item(), "gp": d.gp.item()})
    _backward_step(d.total, state.opt_d)
    return d.total.item(), d.gp.item()


def _step_mpn(state: TrainState, b: Batch) -> dict:
    pred, _ = state.mpn(b.degraded)
    loss = self_adaptive_bce(pred, b.mask)
    if not torch.isfinite(loss):
        raise _fault(state, "mask loss", {"L_m": loss.item()})
    _backward_step(loss, state.opt_mpn)
    return _record(state.step, L_m=loss.item())


def _step_rin(state: TrainState, b: Batch) -> dict:
    with torch.no_grad():
        _, bottleneck = state.mpn(b.degraded)
    if state.cfg.weights.adv:
        with torch.no_grad():
            fake = state.rin(b.degraded, b.mask, bottleneck)
        l_d, gp = _critic_step(state, fake, b.truth)
    else:
        l_d = gp = None
    fake = state.rin(b.degraded, b.mask, bottleneck)
    total, terms = total_gen_loss(fake, b.truth, state.cfg.weights, state.disc, state.extractor)
    if not torch.isfinite(total):
        raise _fault(state, "generator loss", {k: v.item() for k, v in terms.items()})
    _backward_step(total, state.opt_rin)
    return _record(state.step, L_recon=terms["recon"].item(), L_sem=terms["semantic"].item(),
                   L_mrf=terms["mrf"].item(), L_adv=terms["adv"].item(), L_D=l_d, gp=gp)


def _step_joint(state: TrainState, b: Batch) -> dict:
    if state.cfg.weights.adv:
        with torch.no_grad():
            pred, bottleneck = state.mpn(b.degraded)
            fake = state.rin(b.degraded, pred, bottleneck)
        l_d, gp = _critic_step(state, fake, b.truth)
    else:
        l_d = gp = None
    pred, bottleneck = state.mpn(b.degraded)
    fake = state.rin(b.degraded, pred, bottleneck)
    total, terms = joint_objective(pred, b.mask, fake, b.truth, state.cfg.weights, state.disc, state.extractor)
    if not torch.isfinite(total):
        raise _fault(state, "joint loss", {k: v.item() for k, v in terms.items()})
    _backward_step(total, state.opt_mpn, state.opt_rin)
    return _record(state.step, L_m=terms["mask"].item(), L_recon=terms["recon"].item(),
                   L_sem=terms["semantic"].item(), L_mrf=terms["mrf"].item(), L_adv=terms["adv"].item(),
                   L_D=l_d, gp=gp)


_STEPS: dict[str, Callable[[TrainState, Batch], dict]] = {"mpn": _step_mpn, "rin": _step_rin, "joint": _step_joint}


def _run(state: TrainState, data: Batch, stage: str, logger: Callable[[dict], None] | None) -> TrainState:
    cfg = state.cfg
    step_fn = _STEPS[stage]
    models = {"mpn": (state.mpn,), "rin": (state.rin, state.disc), "joint": (state.mpn, state.rin, state.disc)}[stage]
    for m in (state.mpn, state.rin, state.disc):
        m.train(m in models)
    out = Path(cfg.out) if cfg.out else None
    for _ in range(cfg.steps):
        b = data.take(batch_indices(len(data), cfg.batch_size, cfg.seed, state.step))
        record = step_fn(state, b)
        _check(state, record)
        state.step += 1
        record["step"] = state.step
        state.history.append(record)
        if logger is not None:
            logger(record)
        if out is not None and cfg.snapshot_every and state.step % cfg.snapshot_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            save_state(out / f"step_{state.step:06d}.ckpt", state)
        if state.step % 100 == 0:
            log.info("%s step %d %s", stage, state.step, {k: v for k, v in record.items() if v is not None})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_state(out / "last.ckpt", state)
    return state


def _prepare(cfg: TrainConfig, stage: str, state: TrainState | None) -> TrainState:
    cfg = dataclasses.replace(cfg, stage=stage)
    cfg.validate()
    if state is None:
        return new_state(cfg)
    state.use_config(cfg)
    return state


def pretrain_mpn(cfg: TrainConfig, data: Batch, state: TrainState | None = None,
                 logger: Callable[[dict], None] | None = None) -> TrainState:
    """Fit the mask predictor alone with the class-balanced BCE."""
    return _run(_prepare(cfg, "mpn", state), data, "mpn", logger)


def pretrain_rin(cfg: TrainConfig, data: Batch, state: TrainState | None = None,
                 logger: Callable[[dict], None] | None = None) -> TrainState:
    """Fit the inpainter (and critic) with the ground-truth mask as its mask input.

    The MPN bottleneck is still fused in, computed without gradient from
    whatever MPN weights ``state`` carries.
    """
    return _run(_prepare(cfg, "rin", state), data, "rin", logger)


def joint_train(cfg: TrainConfig, warm: TrainState, data: Batch,
                logger: Callable[[dict], None] | None = None) -> TrainState:
    """Alternate critic and (MPN + RIN) updates on ``weights.mask * L_m + L_g``."""
    return _run(_prepare(cfg, "joint", warm), data, "joint", logger)


STAGE_FUNCS = {"mpn": pretrain_mpn, "rin": pretrain_rin}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict(mpn: MPN, rin: RIN, images: Tensor, batch: int = 16) -> tuple[Tensor, Tensor]:
    mpn.eval()
    rin.eval()
    outs, masks = [], []
    for i in range(0, images.shape[0], batch):
        x = images[i:i + batch]
        m, bott = mpn(x)
        outs.append(rin(x, m, bott))
        masks.append(m)
    return torch.cat(outs), torch.cat(masks)


def evaluate(mpn: MPN, rin: RIN, data: Batch, batch: int = 16) -> dict:
    """Mean per-image BCE of the predicted mask and PSNR/SSIM of the repair (in [0, 1] space)."""
    out, pred = predict(mpn, rin, data.degraded, batch)
    bces, psnrs, ssims = [], [], []
    for k in range(out.shape[0]):
        bces.append(eval_bce(pred[k], data.mask[k]))
        a = to_unit(out[k].permute(1, 2, 0))
        b = to_unit(data.truth[k].permute(1, 2, 0))
        psnrs.append(psnr(a, b))
        ssims.append(ssim(a, b))
    return {"n": int(out.shape[0]), "bce": float(np.mean(bces)), "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims))}


@torch.no_grad()
def mask_bce(mpn: MPN, data: Batch, normalize: bool = True) -> float:
    """Class-balanced mask loss of ``mpn`` on ``data`` (per-pixel mean when ``normalize``)."""
    mpn.eval()
    pred, _ = mpn(data.degraded)
    return float(self_adaptive_bce(pred, data.mask, normalize=normalize))
