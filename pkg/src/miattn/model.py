"""Three-branch network: CNN over the feature matrix, row attention, descriptor MLP.

::

    R (150x42) -> [conv 1->6, BN, ReLU, dropout, pool] -> [conv 6->16, BN, ReLU,
                  dropout, pool] -> flatten (5184) -> linear -> m (42)
    (R, m)     -> attention -> a (150), f (42)
    descriptors -> 3 x [linear, BN, ReLU, dropout] (512, 128, 64) -> t (64)
    concat(f, m, t) (148) -> linear -> sigmoid -> probability
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from miattn.chem import parse_smiles
from miattn.descriptors import DESCRIPTOR_NAMES, ScalerParams, apply_scaler, compute_descriptors
from miattn.errors import SchemaMismatch, ShapeMismatch
from miattn.featurize import MAX_LEN, N_FEATURES, featurize_smiles
from miattn.nn.layers import (
    Attention, BatchNorm, Conv2d, Dropout, Flatten, Layer, Linear, MaxPool2d,
    NoForwardRecorded, Parameter, ReLU, bce_loss, sigmoid,
)


@dataclass
class ModelConfig:
    max_len: int = MAX_LEN
    feat_cols: int = N_FEATURES
    conv_channels: tuple[int, int] = (6, 16)
    kernel: int = 3
    dropout: float = 0.0
    m_dim: int = N_FEATURES
    md_widths: tuple[int, ...] = (512, 128, 64)
    n_descriptors: int = len(DESCRIPTOR_NAMES)
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.md_widths = tuple(int(w) for w in self.md_widths)
        if self.m_dim != self.feat_cols:
            raise ValueError("m_dim must equal feat_cols so that R_i . m is defined")
        if min(self.conv_channels + self.md_widths + (self.n_descriptors,)) <= 0:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if min(min(shape) for shape in self.cnn_shapes()) <= 0:
            raise ValueError(f"a {self.max_len}x{self.feat_cols} matrix is too small for two conv/pool stages")

    def cnn_shapes(self) -> list[tuple[int, int, int]]:
        """``(channels, rows, cols)`` after conv1, pool1, conv2, pool2."""
        h, w = self.max_len, self.feat_cols
        shapes = []
        for c in self.conv_channels:
            h, w = h - self.kernel + 1, w - self.kernel + 1
            shapes.append((c, h, w))
            h, w = h // 2, w // 2
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_size(self) -> int:
        c, h, w = self.cnn_shapes()[-1]
        return c * h * w

    @property
    def concat_width(self) -> int:
        return self.feat_cols + self.m_dim + self.md_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["md_widths"] = list(self.md_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AttentionOutput:
    probability: np.ndarray
    a: np.ndarray
    f: np.ndarray
    m: np.ndarray
    t: np.ndarray
    logit: np.ndarray = field(repr=False, default=None)


class MultiInputModel:
    """All learnable parameters plus the frozen descriptor scaler and threshold."""

    def __init__(self, config: ModelConfig, scaler: ScalerParams | None = None):
        self.config = config
        self.scaler = scaler
        if scaler is not None and scaler.n_kept != config.n_descriptors:
            raise SchemaMismatch(f"scaler keeps {scaler.n_kept} descriptors, config expects {config.n_descriptors}")
        init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
        init = np.random.default_rng(init_seq)
        drop_rngs = [np.random.default_rng(s) for s in drop_seq.spawn(2 + len(config.md_widths))]
        c1, c2 = config.conv_channels
        p = config.dropout

        self.cnn: list[tuple[str, Layer]] = [
            ("conv1", Conv2d(1, c1, config.kernel, bias=False, rng=init)),
            ("bn1", BatchNorm(c1)),
            ("relu1", ReLU()),
            ("drop1", Dropout(p, drop_rngs[0])),
            ("pool1", MaxPool2d()),
            ("conv2", Conv2d(c1, c2, config.kernel, bias=False, rng=init)),
            ("bn2", BatchNorm(c2)),
            ("relu2", ReLU()),
            ("drop2", Dropout(p, drop_rngs[1])),
            ("pool2", MaxPool2d()),
            ("flatten", Flatten()),
            ("fc_m", Linear(config.flat_size, config.m_dim, rng=init)),
        ]
        self.cnn[0][1].input_grad = False  # feature matrices are data, not parameters
        self.attention = Attention()
        self.md: list[tuple[str, Layer]] = []
        width = config.n_descriptors
        for i, out in enumerate(config.md_widths, start=1):
            self.md += [
                (f"md{i}", Linear(width, out, bias=False, rng=init)),
                (f"md_bn{i}", BatchNorm(out)),
                (f"md_relu{i}", ReLU()),
                (f"md_drop{i}", Dropout(p, drop_rngs[1 + i])),
            ]
            width = out
        self.head = Linear(config.concat_width, 1, rng=init)
        self._cache = None

    # ------------------------------------------------------------------
    # parameters

    def named_layers(self) -> list[tuple[str, Layer]]:
        return self.cnn + [("attention", self.attention)] + self.md + [("head", self.head)]

    def parameters(self) -> dict[str, Parameter]:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers() for pn, p in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{bn}": b for ln, layer in self.named_layers() for bn, b in layer.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.parameters().items()}
        state.update({name: b.copy() for name, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, layers = self.parameters(), dict(self.named_layers())
        expected = set(params) | set(self.buffers())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise SchemaMismatch(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if name in params:
                if params[name].data.shape != value.shape:
                    raise ShapeMismatch(f"{name}: expected {params[name].data.shape}, got {value.shape}")
                params[name].data[...] = value
            else:
                layer_name, buf = name.rsplit(".", 1)
                layers[layer_name].buffers[buf] = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def set_dropout(self, p: float) -> None:
        for _, layer in self.named_layers():
            if isinstance(layer, Dropout):
                layer.p = p
        self.config.dropout = p

    # ------------------------------------------------------------------
    # forward / backward

    def _as_matrix_batch(self, R) -> np.ndarray:
        R = np.asarray(R, dtype=np.float64)
        if R.ndim == 2:
            R = R[None]
        if R.ndim == 4:
            R = R[:, 0]
        if R.shape[1:] != (self.config.max_len, self.config.feat_cols):
            raise ShapeMismatch(f"expected feature matrices of shape "
                                f"({self.config.max_len}, {self.config.feat_cols}), got {R.shape[1:]}")
        return R

    def cnn_branch_forward(self, R, train: bool = False) -> np.ndarray:
        x = self._as_matrix_batch(R)[:, None]
        for _, layer in self.cnn:
            x = layer.forward(x, train=train)
        return x

    def md_branch_forward(self, D, train: bool = False) -> np.ndarray:
        x = np.atleast_2d(np.asarray(D, dtype=np.float64))
        if x.shape[1] != self.config.n_descriptors:
            raise SchemaMismatch(f"MD branch expects {self.config.n_descriptors} descriptors, got {x.shape[1]}")
        for _, layer in self.md:
            x = layer.forward(x, train=train)
        return x

    def forward(self, R, D, train: bool = False) -> AttentionOutput:
        R = self._as_matrix_batch(R)
        m = self.cnn_branch_forward(R, train)
        a, f = self.attention.forward(R, m, train=train)
        t = self.md_branch_forward(D, train)
        if t.shape[0] != R.shape[0]:
            raise ShapeMismatch(f"{R.shape[0]} feature matrices but {t.shape[0]} descriptor rows")
        z = np.concatenate([f, m, t], axis=1)
        logit = self.head.forward(z, train=train)[:, 0]
        prob = sigmoid(logit)
        prob = np.atleast_1d(prob)
        self._cache = prob if train else None
        return AttentionOutput(prob, a, f, m, t, logit)

    def backward(self, y) -> float:
        """Backpropagate mean BCE of the last training forward; returns the loss."""
        if self._cache is None:
            raise NoForwardRecorded("model.backward needs a preceding training forward pass")
        prob = self._cache
        y = np.asarray(y, dtype=np.float64).reshape(prob.shape)
        loss = bce_loss(prob, y)
        # logit-space gradient: equals the chain rule through the clamp wherever
        # it is inactive, and keeps saturated wrong predictions trainable
        g_logit = (prob - y) / prob.size
        g_z = self.head.backward(g_logit[:, None])
        nf, nm = self.config.feat_cols, self.config.m_dim
        g_f, g_m, g_t = g_z[:, :nf], g_z[:, nf:nf + nm], g_z[:, nf + nm:]
        _, g_m_att = self.attention.backward(None, g_f)
        g = g_m + g_m_att
        for _, layer in reversed(self.cnn):
            g = layer.backward(g)
        g = g_t
        for _, layer in reversed(self.md):
            g = layer.backward(g)
        self._cache = None
        for _, layer in self.named_layers():
            layer.clear()
        return loss

    def predict_proba(self, R, D, batch_size: int = 256) -> np.ndarray:
        n = len(R)
        out = np.empty(n)
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = self.forward(R[sl], D[sl], train=False).probability
        return out

    # ------------------------------------------------------------------
    # raw SMILES

    def prepare(self, smiles: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Featurize, describe and scale SMILES with the model's frozen scaler."""
        if self.scaler is None:
            raise SchemaMismatch("model has no fitted descriptor scaler")
        R = np.zeros((len(smiles), self.config.max_len, self.config.feat_cols), dtype=np.float32)
        raw = np.zeros((len(smiles), len(DESCRIPTOR_NAMES)))
        for i, s in enumerate(smiles):
            g = parse_smiles(s)
            R[i] = featurize_smiles(s, g, max_len=self.config.max_len).data
            raw[i] = compute_descriptors(g).values
        return R, apply_scaler(raw, self.scaler)


def model_forward(model: MultiInputModel, R, D, mode: str = "eval") -> AttentionOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    return model.forward(R, D, train=mode == "train")
