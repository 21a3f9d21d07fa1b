"""Coarse-to-fine point completion network with a classification head.

Encoder: two shared per-point MLPs with max-pool bottlenecks.  The first
stage lifts points to local features and pools a first global code that is
tiled back onto the points; the second stage produces the final per-point
features and the global shape code.  Decoder: a dense MLP predicts a coarse
cloud from the global code, then a folding stage refines each coarse point
into a u x u patch using a 2-D grid, the tiled global code, and the feature
of the input point nearest to that coarse point.  The classifier is a small
MLP on the global code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_input: int = 2048
    n_coarse: int = 1024
    upsample: int = 4           # u: each coarse point becomes u*u fine points
    grid_scale: float = 0.05    # half-extent of the folding grid patch
    mlp1: tuple = (128, 256)
    mlp2: tuple = (512, 1024)
    coarse_hidden: tuple = (1024, 1024)
    folding_hidden: tuple = (512, 512)
    classifier_hidden: int = 256
    n_classes: int = 3

    def __post_init__(self):
        if self.n_input < 1 or self.n_coarse < 1:
            raise ValueError("n_input and n_coarse must be >= 1")
        if self.upsample < 1:
            raise ValueError("upsample must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def n_fine(self) -> int:
        return self.n_coarse * self.upsample * self.upsample

    @property
    def feature_dim(self) -> int:
        return self.mlp2[-1]

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_coarse": self.n_coarse,
            "upsample": self.upsample,
            "grid_scale": self.grid_scale,
            "mlp1": ",".join(str(w) for w in self.mlp1),
            "mlp2": ",".join(str(w) for w in self.mlp2),
            "coarse_hidden": ",".join(str(w) for w in self.coarse_hidden),
            "folding_hidden": ",".join(str(w) for w in self.folding_hidden),
            "classifier_hidden": self.classifier_hidden,
            "n_classes": self.n_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        def ints(s):
            return tuple(int(v) for v in str(s).split(",") if v != "")
        return ModelConfig(
            n_input=int(d["n_input"]),
            n_coarse=int(d["n_coarse"]),
            upsample=int(d["upsample"]),
            grid_scale=float(d["grid_scale"]),
            mlp1=ints(d["mlp1"]),
            mlp2=ints(d["mlp2"]),
            coarse_hidden=ints(d["coarse_hidden"]),
            folding_hidden=ints(d["folding_hidden"]),
            classifier_hidden=int(d["classifier_hidden"]),
            n_classes=int(d["n_classes"]),
        )


def _layer_sizes(cfg: ModelConfig):
    """(name, fan_in, fan_out) for every affine layer."""
    sizes = []
    d = 3
    for i, w in enumerate(cfg.mlp1):
        sizes.append((f"mlp1.{i}", d, w))
        d = w
    d = cfg.mlp1[-1] * 2  # per-point features concatenated with tiled global
    for i, w in enumerate(cfg.mlp2):
        sizes.append((f"mlp2.{i}", d, w))
        d = w
    feat = cfg.mlp2[-1]
    d = feat
    for i, w in enumerate(cfg.coarse_hidden):
        sizes.append((f"coarse.{i}", d, w))
        d = w
    sizes.append((f"coarse.{len(cfg.coarse_hidden)}", d, 3 * cfg.n_coarse))
    d = 2 + 3 + feat + feat  # grid, repeated coarse point, local, global
    for i, w in enumerate(cfg.folding_hidden):
        sizes.append((f"fold.{i}", d, w))
        d = w
    sizes.append((f"fold.{len(cfg.folding_hidden)}", d, 3))
    sizes.append(("cls.0", feat, cfg.classifier_hidden))
    sizes.append(("cls.1", cfg.classifier_hidden, cfg.n_classes))
    return sizes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases; keyed '<layer>.W' / '<layer>.b'."""
    params = {}
    for name, fan_in, fan_out in _layer_sizes(cfg):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{name}.W"] = ad.parameter(w, name=f"{name}.W")
        params[f"{name}.b"] = ad.parameter(np.zeros(fan_out), name=f"{name}.b")
    return params


def folding_grid(cfg: ModelConfig) -> np.ndarray:
    """(u*u, 2) grid in [-grid_scale, grid_scale]^2; a single point at u=1."""
    u = cfg.upsample
    if u == 1:
        ticks = np.array([0.0])
    else:
        ticks = np.linspace(-cfg.grid_scale, cfg.grid_scale, u)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _mlp(x: Tensor, params: dict, prefix: str, n_layers: int,
         relu_last: bool) -> Tensor:
    for i in range(n_layers):
        x = ad.affine(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if relu_last or i < n_layers - 1:
            x = ad.relu(x)
    return x


@dataclass
class ForwardResult:
    coarse: Tensor        # (n_coarse, 3)
    fine: Tensor          # (n_coarse * u^2, 3)
    logits: Tensor        # (n_classes,)
    nn_index: np.ndarray  # input point matched to each coarse point


def forward(params: dict, cfg: ModelConfig, points: np.ndarray) -> ForwardResult:
    """Run the network on one normalized partial cloud (n, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("points must be a nonempty (n, 3) array")
    n = len(pts)
    x = ad.constant(pts, name="input")

    f1 = _mlp(x, params, "mlp1", len(cfg.mlp1), relu_last=False)
    g1 = ad.maxpool_rows(f1)
    g1_tiled = ad.gather_rows(ad.reshape(g1, (1, -1)), np.zeros(n, dtype=np.int64))
    f2 = _mlp(ad.concat_cols([f1, g1_tiled]), params, "mlp2", len(cfg.mlp2),
              relu_last=False)
    g2 = ad.maxpool_rows(f2)
    g2_row = ad.reshape(g2, (1, -1))

    logits_row = ad.affine(ad.relu(ad.affine(g2_row, params["cls.0.W"],
                                             params["cls.0.b"])),
                           params["cls.1.W"], params["cls.1.b"])
    logits = ad.reshape(logits_row, (cfg.n_classes,))

    h = _mlp(g2_row, params, "coarse", len(cfg.coarse_hidden), relu_last=True)
    last = len(cfg.coarse_hidden)
    coarse_flat = ad.affine(h, params[f"coarse.{last}.W"], params[f"coarse.{last}.b"])
    coarse = ad.reshape(coarse_flat, (cfg.n_coarse, 3))

    # Correspondence: nearest input point per coarse point (first index wins on
    # ties).  Indices come from values only; no gradient flows through them.
    d2 = np.sum((coarse.value[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    nn_idx = np.argmin(d2, axis=1)

    u2 = cfg.upsample * cfg.upsample
    repeat_idx = np.repeat(np.arange(cfg.n_coarse), u2)
    grid = np.tile(folding_grid(cfg), (cfg.n_coarse, 1))
    fold_in = ad.concat_cols([
        ad.constant(grid, name="grid"),
        ad.gather_rows(coarse, repeat_idx),
        ad.gather_rows(f2, nn_idx[repeat_idx]),
        ad.gather_rows(g2_row, np.zeros(cfg.n_fine, dtype=np.int64)),
    ])
    fh = _mlp(fold_in, params, "fold", len(cfg.folding_hidden), relu_last=True)
    last = len(cfg.folding_hidden)
    offsets = ad.affine(fh, params[f"fold.{last}.W"], params[f"fold.{last}.b"])
    fine = ad.add(offsets, ad.gather_rows(coarse, repeat_idx))

    return ForwardResult(coarse=coarse, fine=fine, logits=logits, nn_index=nn_idx)


def predicted_class(result: ForwardResult) -> int:
    return int(np.argmax(result.logits.value))


def parameter_vector(params: dict) -> np.ndarray:
    """Flatten parameters in sorted-name order (for tests and summaries)."""
    return np.concatenate([params[k].value.ravel() for k in sorted(params)])


def count_parameters(params: dict) -> int:
    return int(sum(p.value.size for p in params.values()))
