"""Toy backbone, unity head and coarse-to-fine contextual semantic head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Param, Tensor
from .fuse import PredPyramid
from .pyramid import PyramidError, PyramidSpec


@dataclass
class HeadConfig:
    """Channel widths and pyramid geometry.

    ``backbone_channels`` is D, ``unity_channels`` D_u, ``semantic_channels``
    D_s.  Attention queries/keys use ``key_channels`` (default D_s // 2);
    values keep D_s channels.
    """

    spec: PyramidSpec = field(default_factory=PyramidSpec)
    backbone_channels: int = 32
    unity_channels: int = 8
    semantic_channels: int = 16
    key_channels: int | None = None
    pool_sizes: tuple[int, ...] = (1, 3, 6, 8)
    in_channels: int = 3

    def __post_init__(self):
        self.pool_sizes = tuple(int(n) for n in self.pool_sizes)
        if self.key_channels is None:
            self.key_channels = max(1, self.semantic_channels // 2)
        if self.unity_channels > self.backbone_channels:
            raise PyramidError("unity_channels must not exceed backbone_channels")
        if not self.pool_sizes or min(self.pool_sizes) < 1:
            raise PyramidError("pool_sizes must be a non-empty list of positive sizes")
        s = self.spec.finest_stride
        if s & (s - 1):
            raise PyramidError(f"the toy backbone needs a power-of-two finest stride, got {s}")

    @property
    def num_tokens(self) -> int:
        return sum(n * n for n in self.pool_sizes)

    def check_input(self, height: int, width: int) -> None:
        from .pyramid import validate_dims

        validate_dims(self.spec, height, width)
        side = min(height, width) // self.spec.finest_stride
        if max(self.pool_sizes) > side:
            raise PyramidError(f"pool size {max(self.pool_sizes)} exceeds the finest feature side {side}")


def pyramid_pool(x: Tensor, sizes) -> Tensor:
    """Adaptive average pools at each size, flattened to tokens: ``(..., C, 1, sum n^2)``."""
    lead, c = x.shape[:-3], x.shape[-3]
    parts = [ad.reshape(ad.adaptive_avg_pool(x, n), lead + (c, 1, n * n)) for n in sizes]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


def _tokens(x: Tensor) -> Tensor:
    """``(..., C, h, w)`` -> ``(..., h*w, C)``."""
    lead, (c, h, w) = x.shape[:-3], x.shape[-3:]
    return ad.swapaxes(ad.reshape(x, lead + (c, h * w)), -1, -2)


def _untokens(t: Tensor, h: int, w: int) -> Tensor:
    lead, c = t.shape[:-2], t.shape[-1]
    return ad.reshape(ad.swapaxes(t, -1, -2), lead + (c, h, w))


class PyramidNet:
    """Parameters plus forward passes for backbone, unity head and semantic head.

    Parameters live in ``self.params`` keyed by dotted names; batch-norm
    running statistics live in ``self.bn``.  ``self.training`` selects batch
    versus running statistics.
    """

    def __init__(self, cfg: HeadConfig, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params: dict[str, Param] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.training = True
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # ------------------------------------------------------------ construction

    def _conv(self, name, cin, cout, k=1):
        shape = (cout, cin) if k == 1 else (cout, cin, k, k)
        w = ad.glorot_uniform(self._rng, shape, cin * k * k, cout * k * k, self.dtype)
        self.params[f"{name}.w"] = Param(w, f"{name}.w", "glorot_uniform")
        self.params[f"{name}.b"] = Param(np.zeros(cout, self.dtype), f"{name}.b", "zeros")

    def _norm(self, name, c):
        self.params[f"{name}.gamma"] = Param(np.ones(c, self.dtype), f"{name}.gamma", "ones")
        self.params[f"{name}.beta"] = Param(np.zeros(c, self.dtype), f"{name}.beta", "zeros")
        self.bn[name] = BatchNormState(c, dtype=self.dtype)

    def _build(self):
        cfg = self.cfg
        spec = cfg.spec
        D, Du, Ds, Dk = cfg.backbone_channels, cfg.unity_channels, cfg.semantic_channels, cfg.key_channels

        cin = cfg.in_channels
        for i in range(self.num_backbone_blocks):
            self._conv(f"backbone.block{i}.conv", cin, D, k=3)
            self._norm(f"backbone.block{i}.bn", D)
            cin = D
        self._conv("backbone.proj", cin, D)

        self._conv("unity.reduce", D, Du)
        self._conv("unity.embed", Du, Du)
        self._conv("unity.out", Du, 1)

        self._conv("semantic.proj", D, Ds)
        for level in spec.levels:
            p = f"semantic.level{level}"
            self._conv(f"{p}.ca.query", Ds, Dk)
            self._conv(f"{p}.ca.key", Ds, Dk)
            self._conv(f"{p}.ca.value", Ds, Ds)
            self._conv(f"{p}.ca.agg", 2 * Ds, Ds)
            self._norm(f"{p}.ca.agg_bn", Ds)
            if level < spec.num_levels:
                self._conv(f"{p}.cu.upd", 2 * Ds, Ds)
                self._norm(f"{p}.cu.upd_bn", Ds)
            self._conv(f"{p}.block.conv", Ds, Ds)
            self._norm(f"{p}.block.bn", Ds)
            self._conv(f"{p}.block.cls", Ds, spec.num_classes)

    @property
    def num_backbone_blocks(self) -> int:
        return max(1, int(math.log2(self.cfg.spec.finest_stride)))

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def train(self, mode: bool = True) -> "PyramidNet":
        self.training = mode
        return self

    def eval(self) -> "PyramidNet":
        return self.train(False)

    # ------------------------------------------------------------ building blocks

    def conv(self, name: str, x: Tensor) -> Tensor:
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        return ad.conv1x1(x, w, b) if w.ndim == 2 else ad.conv3x3(x, w, b)

    def norm(self, name: str, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             self.bn[name], self.training)

    def conv_bn_relu(self, conv: str, bn: str, x: Tensor) -> Tensor:
        return ad.relu(self.norm(bn, self.conv(conv, x)))

    # ------------------------------------------------------------ forward passes

    def backbone(self, rgb: Tensor) -> Tensor:
        """``(..., 3, H, W)`` -> ``(..., D, H/s_L, W/s_L)``."""
        x = ad.as_tensor(rgb)
        pools = int(math.log2(self.cfg.spec.finest_stride))
        for i in range(self.num_backbone_blocks):
            x = self.conv_bn_relu(f"backbone.block{i}.conv", f"backbone.block{i}.bn", x)
            if i < pools:
                x = ad.avg_pool(x, 2)
        return self.conv("backbone.proj", x)

    def unity_internals(self, feat: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        """Per coarse level, the finest-grid difference and unity maps ``(X_diff, X_unity)``."""
        spec = self.cfg.spec
        xu = self.conv("unity.reduce", feat)
        embedded = self.conv("unity.embed", xu)
        diffs, unities = [], []
        for level in range(1, spec.num_levels):
            k = spec.ratio(level)
            centroid = self.conv("unity.embed", ad.avg_pool(xu, k))
            diff = embedded - ad.nearest_upsample(centroid, k)
            diffs.append(diff)
            unities.append(ad.sigmoid(self.conv("unity.out", diff)))
        return diffs, unities

    def unity_head(self, feat: Tensor) -> list[Tensor]:
        """Unity probabilities for levels 1..L-1, each ``(..., H/s_l, W/s_l)``."""
        spec = self.cfg.spec
        _, unities = self.unity_internals(feat)
        out = []
        for level, u in zip(range(1, spec.num_levels), unities):
            pooled = ad.min_pool(u, spec.ratio(level))
            out.append(ad.reshape(pooled, pooled.shape[:-3] + pooled.shape[-2:]))
        return out

    def context_aggregation(self, level: int, x: Tensor, theta: Tensor) -> Tensor:
        p = f"semantic.level{level}.ca"
        h, w = x.shape[-2:]
        q = _tokens(self.conv(f"{p}.query", x))
        k = _tokens(self.conv(f"{p}.key", theta))
        v = _tokens(self.conv(f"{p}.value", theta))
        att = _untokens(ad.attention(q, k, v), h, w)
        return self.conv_bn_relu(f"{p}.agg", f"{p}.agg_bn", ad.concat([att, x], axis=-3))

    def context_update(self, level: int, x: Tensor, theta: Tensor) -> Tensor:
        # Pool from the finest grid so the token count stays fixed at every level.
        p = f"semantic.level{level}.cu"
        init = pyramid_pool(ad.nearest_upsample(x, self.cfg.spec.ratio(level)), self.cfg.pool_sizes)
        return self.conv_bn_relu(f"{p}.upd", f"{p}.upd_bn", ad.concat([init, theta], axis=-3))

    def semantic_head(self, feat: Tensor, return_context: bool = False):
        """Class logits for levels 1..L, each ``(..., C, H/s_l, W/s_l)``."""
        spec = self.cfg.spec
        finest = self.conv("semantic.proj", feat)
        theta = pyramid_pool(finest, self.cfg.pool_sizes)
        contexts = [theta]
        out = []
        for level in spec.levels:
            x = ad.avg_pool(finest, spec.ratio(level))
            refined = self.context_aggregation(level, x, theta)
            if level < spec.num_levels:
                theta = self.context_update(level, refined, theta)
                contexts.append(theta)
            p = f"semantic.level{level}.block"
            hidden = self.conv_bn_relu(f"{p}.conv", f"{p}.bn", refined)
            out.append(self.conv(f"{p}.cls", hidden))
        return (out, contexts) if return_context else out

    def forward(self, rgb) -> tuple[list[Tensor], list[Tensor]]:
        rgb = ad.as_tensor(rgb)
        self.cfg.check_input(*rgb.shape[-2:])
        feat = self.backbone(rgb)
        return self.semantic_head(feat), self.unity_head(feat)

    __call__ = forward

    def predict(self, rgb: np.ndarray) -> list[PredPyramid]:
        """Inference on a ``(N, 3, H, W)`` batch; one :class:`PredPyramid` per image."""
        sem, uni = self.forward(Tensor(np.asarray(rgb, dtype=self.dtype)))
        return [
            PredPyramid(self.cfg.spec, [s.data[i] for s in sem], [u.data[i] for u in uni])
            for i in range(sem[0].shape[0])
        ]

    # ------------------------------------------------------------ state

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.params.items()}
        for name, s in self.bn.items():
            state[f"{name}.running_mean"] = s.running_mean
            state[f"{name}.running_var"] = s.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
        for name, s in self.bn.items():
            s.running_mean = np.array(state[f"{name}.running_mean"], dtype=self.dtype)
            s.running_var = np.array(state[f"{name}.running_var"], dtype=self.dtype)
