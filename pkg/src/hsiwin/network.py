"""The high-efficiency FCN: EFE and fused-EFE blocks, cost accounting, checkpoints.

Layout: 1x1 stem (B -> first block width), the block stack, then dropout and
a 1x1 head producing K logits. Every convolution has stride 1 and
spatial-preserving padding, so a w x w window maps to w x w logits.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import (
    ActivationSpec,
    BatchNormState,
    Tensor,
    activate,
    batch_norm,
    conv2d,
    depthwise_conv2d,
    dropout,
    layer_norm,
    se_module,
)

__all__ = [
    "BlockSpec",
    "ModelConfig",
    "Model",
    "build_model",
    "count_params",
    "count_flops",
    "flops_breakdown",
    "efe_block_forward",
    "fused_efe_block_forward",
    "load_model_config",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_digest",
    "CONFIG_DIR",
]

CONFIG_DIR = Path(__file__).parent / "configs"

# elementwise FLOPs per output element; conv bias adds are folded into the MACs
NORM_FLOPS = 4  # centre, scale, gain, shift (statistics amortised away)
ACT_FLOPS = 1
ADD_FLOPS = 1


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "EFE" or "FusedEFE"
    out_channels: int
    repeats: int = 1
    expansion_ratio: int = 2
    use_se: bool = False

    def __post_init__(self):
        if self.kind not in ("EFE", "FusedEFE"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.out_channels < 1 or self.repeats < 1:
            raise ValueError("out_channels and repeats must be >= 1")
        if self.expansion_ratio < 1:
            raise ValueError("expansion_ratio must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    input_bands: int
    num_classes: int
    stack: tuple[BlockSpec, ...]
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    norm: str = "LN"
    dropout_p: float = 0.2
    inverted_channels: bool = True
    se_reduction: int = 4
    norm_eps: float = 1e-6

    def validate(self) -> None:
        if self.input_bands < 1 or self.num_classes < 1:
            raise ValueError("input_bands and num_classes must be >= 1")
        if not self.stack:
            raise ValueError("stack must contain at least one block")
        if self.norm not in ("LN", "BN"):
            raise ValueError(f"norm must be 'LN' or 'BN', got {self.norm!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        kinds = [b.kind for b in self.stack]
        if "FusedEFE" in kinds and "EFE" in kinds[kinds.index("FusedEFE") :]:
            raise ValueError("all EFE blocks must precede all fused EFE blocks")
        widths = [b.out_channels for b in self.stack]
        if any(b > a for a, b in zip(widths, widths[1:])):
            raise ValueError("stack widths must be listed non-increasing (widest first)")

    def resolved_stack(self) -> tuple[BlockSpec, ...]:
        """Blocks with the channel schedule actually built.

        Widths are listed widest-first; with ``inverted_channels`` off the
        width sequence is reversed and nothing else changes.
        """
        if self.inverted_channels:
            return self.stack
        widths = [b.out_channels for b in self.stack][::-1]
        return tuple(replace(b, out_channels=c) for b, c in zip(self.stack, widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stack"] = [asdict(b) for b in self.stack]
        d["activation"] = asdict(self.activation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d.pop("name", None)
        for key in [k for k in d if k.startswith("_")]:
            d.pop(key)
        d["stack"] = tuple(BlockSpec(**b) for b in d["stack"])
        act = d.get("activation", {})
        if isinstance(act, str):
            act = {"kind": act}
        d["activation"] = ActivationSpec(**act)
        cfg = cls(**d)
        cfg.validate()
        return cfg


def load_model_config(ref: str | os.PathLike, **overrides) -> ModelConfig:
    """Load a model config from a JSON path or a bundled name such as ``hefcn-default``."""
    path = Path(ref)
    if not path.is_file():
        bundled = CONFIG_DIR / f"{ref}.json"
        if not bundled.is_file():
            raise FileNotFoundError(f"model config not found: {ref}")
        path = bundled
    with open(path) as fh:
        d = json.load(fh)
    d.update(overrides)
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------------------
# model


@dataclass
class Unit:
    """One instantiated block repeat."""

    prefix: str
    kind: str
    in_channels: int
    out_channels: int
    expanded: int
    use_se: bool

    @property
    def residual(self) -> bool:
        return self.in_channels == self.out_channels


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], units: list[Unit]):
        self.config = config
        self.params = params
        self.units = units
        self.bn_states: dict[str, BatchNormState] = {}
        if config.norm == "BN":
            self.bn_states = {u.prefix + ".norm": BatchNormState() for u in units}
        self.windows_forwarded = 0

    @property
    def param_count(self) -> int:
        return count_params(self)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    @property
    def dtype(self):
        return self.params["stem.w"].dtype

    def forward(
        self, x, training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        """Logits N x K x h x w for an N x B x h x w input."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.input_bands:
            raise ValueError(
                f"expected N x {self.config.input_bands} x h x w input, got {x.shape}"
            )
        self.windows_forwarded += x.shape[0]
        p = self.params
        h = conv2d(x, p["stem.w"], p["stem.b"])
        for u in self.units:
            if u.kind == "EFE":
                h = efe_block_forward(h, self, u, training)
            else:
                h = fused_efe_block_forward(h, self, u, training)
        h = dropout(h, self.config.dropout_p, rng, training)
        return conv2d(h, p["head.w"], p["head.b"])

    __call__ = forward

    def _norm(self, h: Tensor, prefix: str, training: bool) -> Tensor:
        p = self.params
        if self.config.norm == "LN":
            return layer_norm(h, p[prefix + ".g"], p[prefix + ".b"], self.config.norm_eps)
        return batch_norm(
            h, p[prefix + ".g"], p[prefix + ".b"], self.bn_states[prefix], training
        )

    def _se(self, h: Tensor, prefix: str) -> Tensor:
        p = self.params
        sp = {k: p[f"{prefix}.{k}"] for k in ("reduce_w", "reduce_b", "expand_w", "expand_b")}
        return se_module(h, sp, self.config.activation)


def efe_block_forward(x: Tensor, model: Model, unit: Unit, training: bool) -> Tensor:
    """1x1 expansion + norm, 3x3 depthwise + activation, [SE], 1x1 projection."""
    if x.shape[1] != unit.in_channels:
        raise ValueError(f"{unit.prefix}: expected {unit.in_channels} channels, got {x.shape[1]}")
    p, pre = model.params, unit.prefix
    h = conv2d(x, p[pre + ".exp.w"], p[pre + ".exp.b"])
    h = model._norm(h, pre + ".norm", training)
    h = depthwise_conv2d(h, p[pre + ".dw.w"], p[pre + ".dw.b"], stride=1, pad=1)
    h = activate(h, model.config.activation)
    if unit.use_se:
        h = model._se(h, pre + ".se")
    h = conv2d(h, p[pre + ".proj.w"], p[pre + ".proj.b"])
    return x + h if unit.residual else h


def fused_efe_block_forward(x: Tensor, model: Model, unit: Unit, training: bool) -> Tensor:
    """Regular 3x3 expansion + norm, [SE], 1x1 projection + activation."""
    if x.shape[1] != unit.in_channels:
        raise ValueError(f"{unit.prefix}: expected {unit.in_channels} channels, got {x.shape[1]}")
    p, pre = model.params, unit.prefix
    h = conv2d(x, p[pre + ".conv.w"], p[pre + ".conv.b"], stride=1, pad=1)
    h = model._norm(h, pre + ".norm", training)
    if unit.use_se:
        h = model._se(h, pre + ".se")
    h = conv2d(h, p[pre + ".proj.w"], p[pre + ".proj.b"])
    h = activate(h, model.config.activation)
    return x + h if unit.residual else h


def _param_shapes(config: ModelConfig) -> tuple[dict[str, tuple[int, ...]], list[Unit]]:
    stack = config.resolved_stack()
    shapes: dict[str, tuple[int, ...]] = {}
    c = stack[0].out_channels
    shapes["stem.w"] = (c, config.input_bands, 1, 1)
    shapes["stem.b"] = (c,)
    units = []
    for bi, spec in enumerate(stack):
        for r in range(spec.repeats):
            pre = f"blocks.{bi}.{r}"
            e = spec.expansion_ratio * c
            u = Unit(pre, spec.kind, c, spec.out_channels, e, spec.use_se)
            if spec.kind == "EFE":
                shapes[pre + ".exp.w"] = (e, c, 1, 1)
                shapes[pre + ".exp.b"] = (e,)
                shapes[pre + ".norm.g"] = (e,)
                shapes[pre + ".norm.b"] = (e,)
                shapes[pre + ".dw.w"] = (e, 3, 3)
                shapes[pre + ".dw.b"] = (e,)
            else:
                shapes[pre + ".conv.w"] = (e, c, 3, 3)
                shapes[pre + ".conv.b"] = (e,)
                shapes[pre + ".norm.g"] = (e,)
                shapes[pre + ".norm.b"] = (e,)
            if spec.use_se:
                if e % config.se_reduction:
                    raise ValueError(f"SE reduction {config.se_reduction} does not divide {e}")
                red = e // config.se_reduction
                shapes[pre + ".se.reduce_w"] = (e, red)
                shapes[pre + ".se.reduce_b"] = (red,)
                shapes[pre + ".se.expand_w"] = (red, e)
                shapes[pre + ".se.expand_b"] = (e,)
            shapes[pre + ".proj.w"] = (spec.out_channels, e, 1, 1)
            shapes[pre + ".proj.b"] = (spec.out_channels,)
            units.append(u)
            c = spec.out_channels
    shapes["head.w"] = (config.num_classes, c, 1, 1)
    shapes["head.b"] = (config.num_classes,)
    return shapes, units


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".dw.w"):
        return shape[1] * shape[2]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]  # linear (in x out)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate weights: N(0, 1/fan_in) kernels, zero biases, unit norm gains."""
    config.validate()
    shapes, units = _param_shapes(config)
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(".norm.g"):
            arr = np.ones(shape)
        elif name.endswith((".b", "_b")) :
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(_fan_in(name, shape)), size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(config, params, units)


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def flops_breakdown(model: Model, h: int, w: int) -> dict[str, int]:
    """Multiply-accumulate count of the convolutions and the other elementwise ops."""
    if h < 1 or w < 1:
        raise ValueError("h and w must be >= 1")
    hw = h * w
    macs = 0
    elementwise = 0
    for name, t in model.params.items():
        if name.endswith(".dw.w"):
            c, kh, kw = t.shape
            macs += hw * kh * kw * c
        elif t.ndim == 4:
            o, c, kh, kw = t.shape
            macs += hw * kh * kw * c * o
    cfg = model.config
    for u in model.units:
        elementwise += NORM_FLOPS * hw * u.expanded
        elementwise += ACT_FLOPS * hw * (u.expanded if u.kind == "EFE" else u.out_channels)
        if u.use_se:
            red = u.expanded // cfg.se_reduction
            macs += 2 * u.expanded * red
            elementwise += hw * u.expanded * 2 + ACT_FLOPS * red + 4 * u.expanded
        if u.residual:
            elementwise += ADD_FLOPS * hw * u.out_channels
    return {"macs": macs, "elementwise": elementwise}


def count_flops(model: Model, h: int, w: int, mac_flops: int = 2, elementwise: bool = True) -> int:
    """FLOPs for one h x w forward pass.

    Each multiply-accumulate counts ``mac_flops`` (2 by default, 1 for the
    "MAC = 1 FLOP" convention). Norms, activations and residual adds add
    their per-element constants when ``elementwise`` is set.
    """
    b = flops_breakdown(model, h, w)
    return mac_flops * b["macs"] + (b["elementwise"] if elementwise else 0)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "hsiwin-checkpoint"
CHECKPOINT_VERSION = 1


def _ckpt_paths(prefix: str | os.PathLike) -> tuple[Path, Path]:
    p = Path(prefix)
    if p.name.endswith(".ckpt.json"):
        p = p.with_name(p.name[: -len(".ckpt.json")])
    return p.with_name(p.name + ".ckpt.json"), p.with_name(p.name + ".ckpt.bin")


def save_checkpoint(model: Model, prefix: str | os.PathLike) -> Path:
    """Write ``<prefix>.ckpt.json`` (manifest) and ``<prefix>.ckpt.bin`` (float32 LE payload)."""
    manifest_path, payload_path = _ckpt_paths(prefix)
    entries = []
    chunks = []
    offset = 0

    def add(name, arr, kind):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, t in model.params.items():
        add(name, t.data, "param")
    for name, st in model.bn_states.items():
        if st.mean is not None:
            add(name + ".running_mean", st.mean, "buffer")
            add(name + ".running_var", st.var, "buffer")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "f32le",
        "payload": payload_path.name,
        "config": model.config.to_dict(),
        "tensors": entries,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_checkpoint(prefix: str | os.PathLike) -> Model:
    manifest_path, _ = _ckpt_paths(prefix)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path}: not a model checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{manifest_path}: unsupported checkpoint version {manifest.get('version')}")
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config, seed=0)
    seen = set()
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(np.float32)
        name = e["name"]
        if e["kind"] == "param":
            if name not in model.params or model.params[name].shape != arr.shape:
                raise ValueError(f"{manifest_path}: tensor {name} does not match the config")
            model.params[name].data = arr
            seen.add(name)
        else:
            base, stat = name.rsplit(".", 1)
            st = model.bn_states[base]
            if stat == "running_mean":
                st.mean = arr.astype(np.float64)
            else:
                st.var = arr.astype(np.float64)
    missing = set(model.params) - seen
    if missing:
        raise ValueError(f"{manifest_path}: missing tensors {sorted(missing)[:5]}")
    return model


def checkpoint_digest(prefix: str | os.PathLike) -> str:
    """SHA-256 over the manifest and payload bytes."""
    h = hashlib.sha256()
    for p in _ckpt_paths(prefix):
        h.update(p.read_bytes())
    return h.hexdigest()
