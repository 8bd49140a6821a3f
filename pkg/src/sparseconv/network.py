"""Network configuration and end-to-end forward execution.

A network is a JSON document (schema below) listing conv, inverse-conv, and
pointwise layers.  Trained weights are out of scope; parameters are generated
deterministically from ``param_seed`` at unit scale so runs are reproducible
and oracle-checkable.

Schema::

    {
      "name": str,
      "in_channels": int,
      "precision": "fp32" | "fp16",
      "param_seed": int,
      "layers": [
        {"id": str, "kind": "conv", "kernel_size": int, "stride": 1|2,
         "out_channels": int, "index_kind"?: "grid"|"hash"|"auto",
         "eps"?: float, "threshold"?: float|"inf"},
        {"id": str, "kind": "inverse_conv", "kernel_size": int,
         "reuse": str, "out_channels": int},
        {"kind": "relu" | "bias_add" | "bn_fold", "id"?: str}
      ]
    }

Every inverse layer's ``reuse`` must name an earlier strided conv layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .autotune import StrategyFile
from .core import PrecisionMode, SparseTensor, WeightTensor, quantize_features
from .execution import (
    ExecOptions,
    LayerSpec,
    LayerStrategy,
    inverse_conv_forward,
    pointwise_apply,
    sparse_conv_forward,
)

POINTWISE_KINDS = ("relu", "bias_add", "bn_fold")
CONV_KINDS = ("conv", "inverse_conv")


class ConfigError(Exception):
    """A network or strategy configuration is inconsistent."""


@dataclass(frozen=True)
class LayerConfig:
    layer_id: str
    kind: str
    kernel_size: int = 1
    stride: int = 1
    out_channels: int = 0
    reuse: str | None = None
    index_kind: str | None = None
    eps: float | None = None
    threshold: float | None = None


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    in_channels: int
    precision: PrecisionMode
    param_seed: int
    layers: tuple[LayerConfig, ...]

    @staticmethod
    def from_dict(doc: dict) -> "NetworkConfig":
        try:
            name = str(doc.get("name", "network"))
            in_channels = int(doc["in_channels"])
            precision = PrecisionMode(doc.get("precision", "fp32"))
            param_seed = int(doc.get("param_seed", 0))
            raw_layers = doc["layers"]
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad network document: {exc}") from exc
        layers = []
        for i, entry in enumerate(raw_layers):
            kind = entry.get("kind")
            if kind not in POINTWISE_KINDS + CONV_KINDS:
                raise ConfigError(f"layer {i}: unknown kind {kind!r}")
            layer_id = str(entry.get("id") or f"{kind}_{i}")
            threshold = entry.get("threshold")
            if threshold == "inf":
                threshold = float("inf")
            layers.append(LayerConfig(
                layer_id=layer_id,
                kind=kind,
                kernel_size=int(entry.get("kernel_size", 1)),
                stride=int(entry.get("stride", 1)),
                out_channels=int(entry.get("out_channels", 0)),
                reuse=entry.get("reuse"),
                index_kind=entry.get("index_kind"),
                eps=entry.get("eps"),
                threshold=threshold,
            ))
        config = NetworkConfig(name, in_channels, precision, param_seed, tuple(layers))
        config.validate()
        return config

    @staticmethod
    def from_file(path) -> "NetworkConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        return NetworkConfig.from_dict(doc)

    def validate(self) -> None:
        seen_ids = set()
        strided: dict[str, LayerConfig] = {}
        channels = self.in_channels
        if channels < 1:
            raise ConfigError("in_channels must be positive")
        for layer in self.layers:
            if layer.layer_id in seen_ids:
                raise ConfigError(f"duplicate layer id {layer.layer_id!r}")
            seen_ids.add(layer.layer_id)
            if layer.kind == "conv":
                if layer.out_channels < 1:
                    raise ConfigError(f"{layer.layer_id}: conv needs out_channels")
                if layer.stride not in (1, 2):
                    raise ConfigError(f"{layer.layer_id}: stride must be 1 or 2")
                if layer.stride > 1:
                    strided[layer.layer_id] = layer
                channels = layer.out_channels
            elif layer.kind == "inverse_conv":
                if layer.reuse not in strided:
                    raise ConfigError(
                        f"{layer.layer_id}: reuse must name an earlier strided conv layer"
                    )
                src = strided[layer.reuse]
                if src.kernel_size != layer.kernel_size:
                    raise ConfigError(
                        f"{layer.layer_id}: kernel size differs from {layer.reuse!r}"
                    )
                if layer.out_channels < 1:
                    raise ConfigError(f"{layer.layer_id}: inverse conv needs out_channels")
                channels = layer.out_channels

    @property
    def conv_layer_ids(self) -> list[str]:
        return [l.layer_id for l in self.layers if l.kind in CONV_KINDS]


def load_builtin_config(name: str) -> NetworkConfig:
    """Load a config bundled with the package (e.g. "minkunet_toy")."""
    ref = resources.files("sparseconv").joinpath(f"configs/{name}.json")
    try:
        doc = json.loads(ref.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"no builtin network named {name!r}") from exc
    return NetworkConfig.from_dict(doc)


def load_network_config(spec: str) -> NetworkConfig:
    """Resolve a CLI network argument: a file path or a builtin name."""
    if str(spec).endswith(".json"):
        return NetworkConfig.from_file(spec)
    return load_builtin_config(str(spec))


@dataclass
class Network:
    """A configured network with materialized parameters."""

    config: NetworkConfig
    weights: dict[str, WeightTensor] = field(default_factory=dict)
    pointwise: dict[str, dict] = field(default_factory=dict)

    @staticmethod
    def build(config: NetworkConfig, spatial_dims: int = 3) -> "Network":
        rng = np.random.default_rng(config.param_seed)
        net = Network(config)
        channels = config.in_channels
        for layer in config.layers:
            if layer.kind in CONV_KINDS:
                volume = layer.kernel_size**spatial_dims
                scale = 1.0 / np.sqrt(volume * channels)
                w = rng.normal(0.0, scale, size=(volume, channels, layer.out_channels))
                net.weights[layer.layer_id] = WeightTensor(
                    w.astype(np.float32), layer.kernel_size, spatial_dims)
                channels = layer.out_channels
            elif layer.kind == "bias_add":
                net.pointwise[layer.layer_id] = {
                    "bias": rng.normal(0.0, 0.1, size=channels).astype(np.float32)}
            elif layer.kind == "bn_fold":
                net.pointwise[layer.layer_id] = {
                    "scale": rng.uniform(0.8, 1.2, size=channels).astype(np.float32),
                    "shift": rng.normal(0.0, 0.05, size=channels).astype(np.float32)}
        return net

    def layer_spec(self, layer: LayerConfig, c_in: int) -> LayerSpec:
        strategy = None
        if layer.eps is not None or layer.threshold is not None:
            strategy = LayerStrategy(layer.eps or 0.0, layer.threshold or 0.0)
        return LayerSpec(
            kernel_size=layer.kernel_size,
            stride=1 if layer.kind == "inverse_conv" else layer.stride,
            c_in=c_in,
            c_out=layer.out_channels,
            transposed=layer.kind == "inverse_conv",
            reuse_key=layer.reuse if layer.kind == "inverse_conv" else layer.layer_id,
            index_kind=layer.index_kind,
            strategy=strategy,
        )

    def describe(self) -> list[dict]:
        """Structural layer descriptions (plain data) for the oracle runner."""
        out = []
        for layer in self.config.layers:
            entry: dict = {"id": layer.layer_id, "kind": layer.kind}
            if layer.kind in CONV_KINDS:
                entry["kernel_size"] = layer.kernel_size
                entry["stride"] = layer.stride
                entry["weights"] = np.asarray(self.weights[layer.layer_id].weights)
                if layer.kind == "inverse_conv":
                    entry["reuse"] = layer.reuse
            else:
                entry.update(self.pointwise.get(layer.layer_id, {}))
            out.append(entry)
        return out

    def strategies_from_file(self, strategy_file: StrategyFile) -> dict[str, LayerStrategy]:
        """Bind a strategy file to this network's conv layers."""
        wanted = self.config.conv_layer_ids
        if len(strategy_file.layers) != len(wanted):
            raise ConfigError(
                f"strategy file has {len(strategy_file.layers)} layer records, "
                f"network has {len(wanted)} conv layers"
            )
        out = {}
        for layer_id in wanted:
            rec = strategy_file.record_for(layer_id)
            if rec is None:
                raise ConfigError(f"strategy file has no record for layer {layer_id!r}")
            out[layer_id] = LayerStrategy(rec.eps, rec.threshold, rec.index_kind)
        return out

    def forward(self, t: SparseTensor,
                strategies: dict[str, LayerStrategy] | None = None,
                options: ExecOptions | None = None) -> SparseTensor:
        """Run the full network; per-layer options get fresh labels."""
        base = options or ExecOptions()
        t = quantize_features(t, self.config.precision)
        map_cache: dict = {}
        for layer in self.config.layers:
            opts = replace(base, layer_label=layer.layer_id)
            if layer.kind == "conv":
                spec = self.layer_spec(layer, t.num_channels)
                strat = (strategies or {}).get(layer.layer_id)
                t = sparse_conv_forward(t, self.weights[layer.layer_id], spec,
                                        strat, map_cache, opts)
            elif layer.kind == "inverse_conv":
                spec = self.layer_spec(layer, t.num_channels)
                strat = (strategies or {}).get(layer.layer_id)
                t = inverse_conv_forward(t, self.weights[layer.layer_id], spec,
                                         map_cache, strat, opts)
            else:
                timer = base.timer
                if timer is not None:
                    with timer.section(layer.layer_id, "other"):
                        t = pointwise_apply(t, layer.kind,
                                            **self.pointwise.get(layer.layer_id, {}))
                else:
                    t = pointwise_apply(t, layer.kind,
                                        **self.pointwise.get(layer.layer_id, {}))
        return t
