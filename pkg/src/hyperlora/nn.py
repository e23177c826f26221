"""Dense networks, low-rank adapters and hypernetworks.

All trainable state lives in flat :class:`ParamVector` objects whose layout
is canonical: layers in ascending order; within a layer the weight
(row-major, shape ``(out, in)``) then the bias; for adapters ``A`` (r x in)
then ``B`` (out x r).  Views of a flat vector, whether a numpy array or a
taped node, are produced by :meth:`ParamVector.unflatten`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"HLRACKPT"
CHECKPOINT_VERSION = 1

HYPER_HIDDEN = (512, 512, 256, 256, 128, 128)
BASE_HIDDEN = (64,) * 6


class ShapeError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message)


class RankError(ValueError):
    def __init__(self, layer: str, rank: int, shape: tuple):
        self.layer = layer
        super().__init__(f"rank {rank} not below min dimension of {layer} {shape}")


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamVector:
    """Flat float64 parameter vector plus its (name, shape, offset) layout."""

    def __init__(self, values, layout: Sequence[LayoutEntry]):
        self.values = np.asarray(values, dtype=np.float64).ravel()
        self.layout = tuple(layout)
        expected = sum(e.size for e in self.layout)
        if self.values.size != expected:
            raise ShapeError(f"vector length {self.values.size} != layout size {expected}",
                             offset=min(self.values.size, expected))

    @staticmethod
    def build_layout(named_shapes: Sequence[tuple]) -> tuple:
        out, off = [], 0
        for name, shape in named_shapes:
            e = LayoutEntry(name, tuple(int(s) for s in shape), off)
            out.append(e)
            off += e.size
        return tuple(out)

    @classmethod
    def from_arrays(cls, named: Sequence[tuple]) -> ParamVector:
        layout = cls.build_layout([(n, np.shape(a)) for n, a in named])
        return cls(np.concatenate([np.ravel(a) for _, a in named]) if named else np.zeros(0), layout)

    def __len__(self):
        return self.values.size

    @property
    def size(self) -> int:
        return self.values.size

    def unflatten(self, flat=None) -> dict:
        """Name -> view; ``flat`` may be an array or a taped node of the same length."""
        flat = self.values if flat is None else flat
        n = ad.value_of(flat).shape[-1]
        if n != self.size:
            raise ShapeError(f"flat length {n} != layout size {self.size}", offset=min(n, self.size))
        return {e.name: flat[e.offset:e.offset + e.size].reshape(e.shape) for e in self.layout}

    def with_values(self, values) -> ParamVector:
        return ParamVector(values, self.layout)

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def names(self) -> list[str]:
        """Per-scalar labels such as ``layer0.weight[3]`` (for error messages)."""
        return [f"{e.name}[{i}]" for e in self.layout for i in range(e.size)]

    def layout_table(self) -> list[dict]:
        return [{"name": e.name, "shape": list(e.shape), "offset": e.offset} for e in self.layout]


def flatten(named: dict, layout: Sequence[LayoutEntry]) -> np.ndarray:
    return np.concatenate([np.ravel(named[e.name]) for e in layout])


# --------------------------------------------------------------------------
# dense networks

@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden_widths: tuple = BASE_HIDDEN
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if min((self.input_dim, self.output_dim) + self.hidden_widths) < 1:
            raise ValueError(f"all widths must be >= 1: {self}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


def mlp_layout(sizes: Sequence[int]) -> tuple:
    shapes = []
    for i in range(len(sizes) - 1):
        shapes.append((f"layer{i}.weight", (sizes[i + 1], sizes[i])))
        shapes.append((f"layer{i}.bias", (sizes[i + 1],)))
    return ParamVector.build_layout(shapes)


def layers_from(named: dict, n_layers: int) -> list[tuple]:
    return [(named[f"layer{i}.weight"], named[f"layer{i}.bias"]) for i in range(n_layers)]


@dataclass
class Mlp:
    """A dense network: configuration plus a flat parameter vector."""
    config: MlpConfig
    params: ParamVector

    @property
    def n_layers(self) -> int:
        return len(self.config.sizes) - 1

    @property
    def n_params(self) -> int:
        return self.params.size

    def layers(self, flat=None) -> list[tuple]:
        return layers_from(self.params.unflatten(flat), self.n_layers)

    def forward(self, x) -> np.ndarray:
        return ad.dense_forward(self.layers(), x, self.config.activation)

    __call__ = forward

    def jets(self, x, directions, order=1, second=None):
        return ad.input_jet(self.layers(), x, directions, order, self.config.activation, second)


def mlp_init(cfg: MlpConfig) -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic in ``cfg.init_seed``."""
    rng = np.random.default_rng(cfg.init_seed)
    layout = mlp_layout(cfg.sizes)
    named = {}
    for e in layout:
        if e.name.endswith(".weight"):
            fan_out, fan_in = e.shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            named[e.name] = rng.uniform(-lim, lim, size=e.shape)
        else:
            named[e.name] = np.zeros(e.shape)
    return Mlp(cfg, ParamVector(flatten(named, layout), layout))


# --------------------------------------------------------------------------
# low-rank adaptation

def lora_layout(sizes: Sequence[int], rank: int) -> tuple:
    shapes = []
    for i in range(len(sizes) - 1):
        n, m = sizes[i], sizes[i + 1]
        shapes.append((f"layer{i}.A", (rank, n)))
        shapes.append((f"layer{i}.B", (m, rank)))
    return ParamVector.build_layout(shapes)


def lora_param_count(sizes: Sequence[int], rank: int) -> int:
    return sum(rank * (sizes[i] + sizes[i + 1]) for i in range(len(sizes) - 1))


def check_rank(sizes: Sequence[int], rank: int, allow_full_rank: bool = False):
    """Validate ``rank`` against every square (hidden-to-hidden) weight matrix.

    Thin input/output matrices are exempt: their min dimension is the input
    or output count (2 or 3), below every useful rank.
    """
    if rank < 1:
        raise RankError("all layers", rank, ())
    for i in range(len(sizes) - 1):
        n, m = sizes[i], sizes[i + 1]
        if i == 0 or i == len(sizes) - 2:
            continue
        limit = min(m, n)
        if rank > limit or (rank == limit and not allow_full_rank):
            raise RankError(f"layer{i}", rank, (m, n))


@dataclass
class LoraNetwork:
    """Frozen base network plus per-layer low-rank factors (delta W = B @ A)."""
    base: Mlp
    rank: int
    adapters: ParamVector

    @property
    def n_layers(self) -> int:
        return self.base.n_layers

    def layers(self, adapter_flat=None) -> list[tuple]:
        return lora_layers(self.base, self.adapters.unflatten(adapter_flat))

    def forward(self, x) -> np.ndarray:
        return ad.dense_forward(self.layers(), x, self.base.config.activation)

    __call__ = forward

    def jets(self, x, directions, order=1, second=None):
        return ad.input_jet(self.layers(), x, directions, order, self.base.config.activation, second)


def lora_layers(base: Mlp, adapters: dict) -> list[tuple]:
    """Effective ``(W0 + B @ A, b0)`` per layer; ``adapters`` may hold taped views."""
    out = []
    for i, (W0, b0) in enumerate(base.layers()):
        A, B = adapters[f"layer{i}.A"], adapters[f"layer{i}.B"]
        out.append((W0 + ad.matmul(B, A), b0))
    return out


def lora_wrap(base: Mlp, rank: int, seed: int = 0, b_std: float = 0.01,
              allow_full_rank: bool = False) -> LoraNetwork:
    """Attach adapters with A = 0 and B ~ N(0, b_std^2) to every weight matrix."""
    sizes = base.config.sizes
    check_rank(sizes, rank, allow_full_rank)
    layout = lora_layout(sizes, rank)
    rng = np.random.default_rng(seed)
    named = {}
    for e in layout:
        named[e.name] = np.zeros(e.shape) if e.name.endswith(".A") else rng.normal(0.0, b_std, e.shape)
    return LoraNetwork(base, rank, ParamVector(flatten(named, layout), layout))


def effective_weights(lnet: LoraNetwork) -> list[tuple]:
    return [(np.array(W), np.array(b)) for W, b in lnet.layers()]


def merged(lnet: LoraNetwork) -> Mlp:
    """Dense network carrying the effective weights of ``lnet``."""
    layout = lnet.base.params.layout
    named = {}
    for i, (W, b) in enumerate(effective_weights(lnet)):
        named[f"layer{i}.weight"], named[f"layer{i}.bias"] = W, b
    return Mlp(lnet.base.config, ParamVector(flatten(named, layout), layout))


# --------------------------------------------------------------------------
# task embeddings

@dataclass(frozen=True)
class EmbeddingCodec:
    """Invertible map from raw task parameters to hypernetwork inputs.

    ``kind`` is ``affine`` (``lo..hi`` -> -1..1), ``log10`` (same on log10
    values) or ``identity``.
    """
    kind: str = "identity"
    lo: float = -1.0
    hi: float = 1.0

    def encode(self, raw) -> np.ndarray:
        raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
        if self.kind == "identity":
            return raw.copy()
        v = np.log10(raw) if self.kind == "log10" else raw
        lo, hi = (np.log10(self.lo), np.log10(self.hi)) if self.kind == "log10" else (self.lo, self.hi)
        return 2.0 * (v - lo) / (hi - lo) - 1.0

    def decode(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        if self.kind == "identity":
            return z.copy()
        lo, hi = (np.log10(self.lo), np.log10(self.hi)) if self.kind == "log10" else (self.lo, self.hi)
        v = lo + (z + 1.0) * (hi - lo) / 2.0
        return 10.0 ** v if self.kind == "log10" else v

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskEmbedding:
    raw: np.ndarray
    normalized: np.ndarray

    @classmethod
    def of(cls, raw, codec: EmbeddingCodec) -> TaskEmbedding:
        raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
        return cls(raw, codec.encode(raw))


# --------------------------------------------------------------------------
# hypernetworks

@dataclass
class HyperNetwork:
    """Dense network mapping a task embedding to a target parameter vector.

    ``target`` is the layout being predicted (adapter layout for ``lora``
    mode, the full base layout for ``full`` mode).
    """
    net: Mlp
    target_layout: tuple
    mode: str = "lora"
    output_scale: float = 1.0

    @property
    def n_outputs(self) -> int:
        return self.net.config.output_dim

    def predict(self, embeddings, flat=None):
        """Batch prediction: (T, e) embeddings -> (T, P) outputs (array or node)."""
        lam = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if lam.shape[1] != self.net.config.input_dim:
            raise ShapeError(f"embedding dim {lam.shape[1]} != hypernetwork input {self.net.config.input_dim}")
        return ad.dense_forward(self.net.layers(flat), lam, self.net.config.activation) * self.output_scale


def make_hypernetwork(embed_dim: int, target: ParamVector, mode: str = "lora",
                      hidden=HYPER_HIDDEN, output_scale: float = 1.0, seed: int = 0,
                      output_bias: np.ndarray | None = None) -> HyperNetwork:
    """Hypernetwork whose last layer has zero weights.

    With ``output_bias=None`` the bias is zero, so every prediction starts
    at 0.  Passing the target's initial vector (divided by ``output_scale``
    internally) makes every prediction start there instead.
    """
    if mode not in ("lora", "full"):
        raise ValueError(f"mode must be lora|full, got {mode!r}")
    cfg = MlpConfig(embed_dim, target.size, tuple(hidden), "tanh", seed)
    net = mlp_init(cfg)
    last = len(cfg.sizes) - 2
    vals = net.params.values.copy()
    for e in net.params.layout:
        if e.name in (f"layer{last}.weight", f"layer{last}.bias"):
            vals[e.offset:e.offset + e.size] = 0.0
    if output_bias is not None:
        e = next(e for e in net.params.layout if e.name == f"layer{last}.bias")
        vals[e.offset:e.offset + e.size] = np.asarray(output_bias, dtype=np.float64) / output_scale
    return HyperNetwork(Mlp(cfg, net.params.with_values(vals)), target.layout, mode, output_scale)


def hypernet_forward(h: HyperNetwork, embedding) -> ParamVector:
    lam = embedding.normalized if isinstance(embedding, TaskEmbedding) else embedding
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if lam.ndim != 1 or lam.size != h.net.config.input_dim:
        raise ShapeError(f"embedding shape {lam.shape} != ({h.net.config.input_dim},)")
    out = h.predict(lam[None, :])[0]
    return ParamVector(out, h.target_layout)


def assembled_layers(base: Mlp, theta, mode: str, layout: Sequence[LayoutEntry] | None = None) -> list[tuple]:
    """Layers of the network assembled from a predicted vector (array or node).

    ``lora``: W0 + B @ A per layer with biases from the base.
    ``full``: the predicted vector replaces every weight and bias.
    """
    if mode == "lora":
        if layout is None:
            raise ShapeError("lora mode needs the adapter layout")
        return lora_layers(base, ParamVector(np.zeros(sum(e.size for e in layout)), layout).unflatten(theta))
    if mode == "full":
        return layers_from(base.params.unflatten(theta), base.n_layers)
    raise ValueError(f"mode must be lora|full, got {mode!r}")


def _check_layout(got: Sequence[LayoutEntry], want: Sequence[LayoutEntry]):
    for g, w in zip(got, want):
        if g != w:
            raise ShapeError(f"layout mismatch at {g.name}{g.shape} vs {w.name}{w.shape}", offset=w.offset)
    if len(got) != len(want):
        short = min(len(got), len(want))
        off = want[short].offset if short < len(want) else got[short].offset
        raise ShapeError("layout length mismatch", offset=off)


def apply_predicted(base: Mlp, theta: ParamVector, mode: str = "lora") -> Mlp:
    """Dense network assembled from ``theta`` (see :func:`assembled_layers`)."""
    sizes = base.config.sizes
    if mode == "lora":
        rank = theta.layout[0].shape[0] if theta.layout else 0
        _check_layout(theta.layout, lora_layout(sizes, rank))
    elif mode == "full":
        _check_layout(theta.layout, base.params.layout)
    layers = assembled_layers(base, theta.values, mode, theta.layout)
    named = {}
    for i, (W, b) in enumerate(layers):
        named[f"layer{i}.weight"], named[f"layer{i}.bias"] = np.asarray(W), np.asarray(b)
    layout = base.params.layout
    return Mlp(base.config, ParamVector(flatten(named, layout), layout))


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ParamVector, config: dict, seed: int, metadata: dict | None = None) -> Path:
    """Binary header + little-endian float64 vector, plus a JSON sidecar.

    Layout: magic (8 bytes), u32 header length, UTF-8 JSON header
    (format version, config echo, seed, layout table), then the values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "seed": int(seed),
        "layout": params.layout_table(),
        "n_values": params.size,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(metadata or {}, indent=2, sort_keys=True, default=_json_default))
    return path


def load_checkpoint(path) -> tuple[ParamVector, dict, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header['format_version']}")
    values = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(np.float64)
    layout = ParamVector.build_layout([(e["name"], tuple(e["shape"])) for e in header["layout"]])
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return ParamVector(values, layout), header, meta


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
