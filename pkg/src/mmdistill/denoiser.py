"""x-prediction MLP denoiser with log-SNR time embedding and classifier-free guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from mmdistill import autodiff as ad
from mmdistill.autodiff import ShapeError, Tensor
from mmdistill.params import ParamVector
from mmdistill.schedule import Schedule

LOGSNR_CLIP = 15.0


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    input_dim: int = 2
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    time_embed_dim: int = 32
    num_classes: int = 0
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.time_embed_dim, *self.hidden_dims)
        if any(d < 1 for d in dims) or self.num_classes < 0:
            raise ValueError(f"invalid architecture {self}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim + self.time_embed_dim, *self.hidden_dims, self.input_dim)

    def layout(self):
        out = ad.MLP(self.dims, self.activation).layout()
        if self.num_classes:
            first = self.dims[1]
            out.append(("class_embed", (self.num_classes + 1, first)))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", (256, 256, 256)))})


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 0.0
    clip_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if not lo < hi:
                raise ValueError("clip_range needs lo < hi")
            object.__setattr__(self, "clip_range", (float(lo), float(hi)))

    @property
    def active(self) -> bool:
        return self.scale > 0 or self.clip_range is not None


def time_embedding(logsnr, dim: int) -> np.ndarray:
    lam = np.clip(np.atleast_1d(np.asarray(logsnr, dtype=np.float64)), -LOGSNR_CLIP, LOGSNR_CLIP)
    freqs = np.geomspace(0.05, 2.0, dim // 2)
    ang = lam[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_params(arch: ArchDescriptor, rng: np.random.Generator) -> ParamVector:
    """Fan-in scaled normal weights, zero biases, zero final layer (initial output 0)."""
    pv = ParamVector.zeros(arch.layout())
    n = len(arch.dims) - 1
    for i, (a, b) in enumerate(zip(arch.dims[:-1], arch.dims[1:])):
        if i < n - 1:
            pv[f"w{i}"] = rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))
    if arch.num_classes:
        pv["class_embed"] = rng.normal(0.0, 1.0, size=(arch.num_classes + 1, arch.dims[1]))
    return pv


def _class_index(arch: ArchDescriptor, class_id, batch: int):
    if arch.num_classes == 0:
        if class_id is not None:
            raise ConditioningError("class_id given for an unconditional network")
        return None
    if class_id is None:
        return np.full(batch, arch.num_classes, dtype=np.int64)
    idx = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (batch,)).copy()
    if np.any(idx >= arch.num_classes):
        raise ConditioningError(f"class ids must be < {arch.num_classes}")
    idx[idx < 0] = arch.num_classes  # -1 means "null class"
    return idx


@dataclass
class DenoiserNet:
    """g(z, t, c) with t and c fixed, as a network over the input z.

    ``class_index`` uses row ``num_classes`` of the embedding table as the
    null (unconditional) class.
    """

    arch: ArchDescriptor
    temb: np.ndarray
    class_index: np.ndarray | None = None
    _mlp: ad.MLP = field(init=False, repr=False)

    def __post_init__(self):
        self._mlp = ad.MLP(self.arch.dims, self.arch.activation)

    @classmethod
    def at(cls, arch: ArchDescriptor, sched: Schedule, t, batch: int, class_id=None) -> "DenoiserNet":
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        temb = time_embedding(sched.logsnr(t), arch.time_embed_dim)
        return cls(arch, temb, _class_index(arch, class_id, batch))

    def layout(self):
        return self.arch.layout()

    def apply(self, params, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.arch.input_dim:
            raise ShapeError(f"denoiser expects (batch, {self.arch.input_dim}), got {z.shape}")
        if z.shape[0] != self.temb.shape[0]:
            raise ShapeError(f"batch {z.shape[0]} does not match time batch {self.temb.shape[0]}")
        act = ad.ACTIVATIONS[self.arch.activation]
        h = ad.concat([z, Tensor(self.temb)], axis=1)
        n = len(self.arch.dims) - 1
        for i in range(n):
            h = h @ params[f"w{i}"] + params[f"b{i}"]
            if i == 0 and self.class_index is not None:
                h = h + ad.take_rows(params["class_embed"], self.class_index)
            if i < n - 1:
                h = act(h)
        return h


@dataclass
class GuidedDenoiserNet:
    """Guided and clipped forward value; derivatives of the plain conditional pass."""

    cond: DenoiserNet
    uncond: DenoiserNet
    guidance: GuidanceConfig

    def layout(self):
        return self.cond.layout()

    def apply(self, params, z: Tensor) -> Tensor:
        c = self.cond.apply(params, z)
        value = c.data
        if self.guidance.scale > 0:
            plain = {k: Tensor(v.data) for k, v in params.items()}
            u = self.uncond.apply(plain, Tensor(z.data)).data
            value = (1.0 + self.guidance.scale) * value - self.guidance.scale * u
        if self.guidance.clip_range is not None:
            value = np.clip(value, *self.guidance.clip_range)
        return ad.straight_through(value, c)


def make_net(arch, sched, t, batch, class_id=None, guidance: GuidanceConfig | None = None):
    """The network object for g(., t, c), guided when ``guidance`` is active."""
    cond = DenoiserNet.at(arch, sched, t, batch, class_id)
    if guidance is None or not guidance.active:
        return cond
    if guidance.scale > 0 and arch.num_classes == 0:
        raise ConditioningError("guidance requested on an unconditional network")
    if guidance.scale > 0 and class_id is None:
        raise ConditioningError("guidance needs class labels")
    uncond = DenoiserNet.at(arch, sched, t, batch, None) if arch.num_classes else cond
    return GuidedDenoiserNet(cond, uncond, guidance)


def _check_z(z_t) -> np.ndarray:
    z = np.asarray(z_t, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if not np.all(np.isfinite(z)):
        raise ValueError("z_t must be finite")
    return z


def denoise(params: ParamVector, arch: ArchDescriptor, sched: Schedule, z_t, t, class_id=None) -> np.ndarray:
    z = _check_z(z_t)
    return ad.forward(make_net(arch, sched, t, z.shape[0], class_id), params, z)


def denoise_guided(params, arch, sched, z_t, t, class_id, g: GuidanceConfig) -> np.ndarray:
    z = _check_z(z_t)
    return ad.forward(make_net(arch, sched, t, z.shape[0], class_id, g), params, z)
