"""The all-in-one model: grid of nested sub-networks, extraction to standalone
quantized models, size accounting and persistence."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import fileformat
from .autograd import Tensor, no_grad
from .encoder import (
    EncoderConfig,
    MaskPolicy,
    SpecError,
    SubnetSpec,
    conformer_forward,
    encoder_forward,
    ffn_width_of,
    init_params,
    kept_index_sets,
    param_inventory,
    scale_name,
    validate_spec,
)
from .quant import FULL_PRECISION, IntTensor, export_int, init_scale

# Full-scale reference configuration (d_model, heads and kernel are not reported).
FULL_SCALE_CONFORMER = EncoderConfig(d_in=80, d_model=256, depth_max=12, ffn_max=2048, heads=4, conv_kernel=15, vocab=2000)


@dataclass(frozen=True)
class Grid:
    depths: tuple[int, ...]
    widths: tuple[int, ...]
    precisions: tuple[int, ...]

    def __post_init__(self):
        for name in ("depths", "widths", "precisions"):
            values = tuple(sorted(set(int(v) for v in getattr(self, name))))
            if not values or values[0] < 1:
                raise ValueError(f"grid {name} must be a nonempty list of positive integers")
            object.__setattr__(self, name, values)
        for b in self.precisions:
            SubnetSpec(1, 1, b)

    @property
    def largest(self) -> SubnetSpec:
        return SubnetSpec(self.depths[-1], self.widths[-1], self.precisions[-1])

    @property
    def smallest(self) -> SubnetSpec:
        return SubnetSpec(self.depths[0], self.widths[0], self.precisions[0])

    @property
    def quant_bits(self) -> tuple[int, ...]:
        return tuple(b for b in self.precisions if b != FULL_PRECISION)

    def __contains__(self, spec: object) -> bool:
        return (
            isinstance(spec, SubnetSpec)
            and spec.depth in self.depths
            and spec.width in self.widths
            and spec.bits in self.precisions
        )

    def __len__(self) -> int:
        return len(self.depths) * len(self.widths) * len(self.precisions)

    def to_dict(self) -> dict:
        return {"depths": list(self.depths), "widths": list(self.widths), "precisions": list(self.precisions)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Grid":
        return cls(tuple(d["depths"]), tuple(d["widths"]), tuple(d["precisions"]))

    @classmethod
    def single(cls, spec: SubnetSpec) -> "Grid":
        return cls((spec.depth,), (spec.width,), (spec.bits,))


def enumerate_grid(grid: Grid) -> list[SubnetSpec]:
    """Every (depth, width, bits) combination, largest first."""
    specs = [SubnetSpec(d, w, b) for d in grid.depths for w in grid.widths for b in grid.precisions]
    return sorted(specs, reverse=True)


def config_for_grid(base: EncoderConfig, grid: Grid) -> EncoderConfig:
    return dataclasses.replace(base, depth_max=grid.depths[-1], ffn_max=grid.widths[-1])


# -- accounting -----------------------------------------------------------------------


def subnet_shapes(config: EncoderConfig, spec: SubnetSpec) -> list[tuple[str, tuple[int, ...], bool]]:
    """Physical tensor shapes of a sub-network after depth and width slicing."""
    validate_spec(config, spec)
    out = []
    for info in param_inventory(config):
        if info.layer is not None and info.layer >= spec.depth:
            continue
        shape = info.shape
        if ffn_width_of(info.name) is not None:
            axis = 1 if info.name.endswith(".w2") else 0
            shape = tuple(spec.width if i == axis else n for i, n in enumerate(shape))
        out.append((info.name, shape, info.quantizable))
    return out


def param_count(config: EncoderConfig, spec: SubnetSpec) -> tuple[int, int]:
    """``(n_quantizable, n_fixed)`` for a sub-network; fixed covers front-end, heads, decoder and vectors."""
    nq = nf = 0
    for _, shape, quantizable in subnet_shapes(config, spec):
        n = int(np.prod(shape))
        if quantizable:
            nq += n
        else:
            nf += n
    return nq, nf


def encoder_param_count(config: EncoderConfig, spec: SubnetSpec) -> int:
    """Parameters of the front-end plus the used encoder layers (the table's "#Param")."""
    return sum(
        int(np.prod(shape))
        for name, shape, _ in subnet_shapes(config, spec)
        if name.startswith(("enc.", "frontend."))
    )


def ratio_from_counts(n_base_total: float, n_quantizable: float, bits: int, n_fixed: float = 0.0) -> float:
    """Model-size compression ratio against a 32-bit baseline of ``n_base_total`` parameters."""
    return n_base_total * 32.0 / (n_quantizable * bits + n_fixed * 32.0)


def compression_ratio(
    config: EncoderConfig, base_spec: SubnetSpec, spec: SubnetSpec, base_config: EncoderConfig | None = None
) -> float:
    if base_spec.bits != FULL_PRECISION:
        raise SpecError("the compression baseline must be full precision (32bit)")
    base_total = sum(param_count(base_config or config, base_spec))
    nq, nf = param_count(config, spec)
    return ratio_from_counts(base_total, nq, spec.bits, nf)


# -- models ----------------------------------------------------------------------------


@dataclass
class SupernetModel:
    config: EncoderConfig
    grid: Grid
    params: dict[str, Tensor]
    policy: MaskPolicy = MaskPolicy.LEADING
    training_meta: dict = field(default_factory=lambda: {"step": 0, "seed": None})

    @classmethod
    def create(
        cls,
        config: EncoderConfig,
        grid: Grid,
        rng: np.random.Generator,
        policy: MaskPolicy | str = MaskPolicy.LEADING,
        seed: int | None = None,
    ) -> "SupernetModel":
        config = config_for_grid(config, grid)
        master = init_params(config, rng)
        params = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in master.items()}
        for info in param_inventory(config):
            if info.quantizable:
                for bits in grid.quant_bits:
                    sname = scale_name(info.name, bits)
                    params[sname] = Tensor(init_scale(master[info.name], bits), requires_grad=True, name=sname)
        model = cls(config, grid, params, MaskPolicy(policy), {"step": 0, "seed": seed})
        model.params = {name: params[name] for name in model.param_order()}
        return model

    def specs(self) -> list[SubnetSpec]:
        return enumerate_grid(self.grid)

    def master_weights(self) -> dict[str, np.ndarray]:
        return {i.name: self.params[i.name].data for i in param_inventory(self.config)}

    def scales(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.params.items() if k.startswith("scale/")}

    def forward(self, spec: SubnetSpec, x, lengths=None) -> Tensor:
        if spec not in self.grid:
            raise SpecError(f"{spec} is not in the grid")
        return encoder_forward(self.params, self.config, spec, x, lengths, self.policy)

    # persistence
    def meta(self) -> dict:
        return {
            "kind": "supernet",
            "config": self.config.to_dict(),
            "grid": self.grid.to_dict(),
            "policy": self.policy.value,
            "training_meta": dict(self.training_meta),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self.params[name].data for name in self.param_order()}

    def param_order(self) -> list[str]:
        names = [i.name for i in param_inventory(self.config)]
        return names + sorted(k for k in self.params if k.startswith("scale/"))

    def save(self, path: str | Path) -> int:
        return fileformat.write(path, self.meta(), self.tensors())

    @classmethod
    def from_container(cls, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> "SupernetModel":
        if meta.get("kind") not in ("supernet", "checkpoint"):
            raise fileformat.FormatError(f"expected a supernet file, found {meta.get('kind')!r}")
        config = EncoderConfig(**meta["config"])
        params = {
            name: Tensor(arr, requires_grad=True, name=name)
            for name, arr in tensors.items()
            if not name.startswith("opt.")
        }
        missing = {i.name for i in param_inventory(config)} - params.keys()
        if missing:
            raise fileformat.FormatError(f"missing tensors: {sorted(missing)[:3]}")
        return cls(config, Grid.from_dict(meta["grid"]), params, MaskPolicy(meta["policy"]), dict(meta["training_meta"]))

    @classmethod
    def load(cls, path: str | Path) -> "SupernetModel":
        return cls.from_container(*fileformat.read(path))


@dataclass
class ExtractedModel:
    spec: SubnetSpec
    config: EncoderConfig
    tensors: dict[str, np.ndarray | IntTensor]
    kept: dict[str, list[int]] = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def weights(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.tensors.items():
            out[name] = Tensor(t.dequantize() if isinstance(t, IntTensor) else t, name=name)
        return out

    def forward(self, x, lengths=None) -> Tensor:
        with no_grad():
            return conformer_forward(self.weights(), self.config, self.spec.depth, x, lengths)[0]

    def param_count(self) -> tuple[int, int]:
        return param_count(self.config, SubnetSpec(self.config.depth_max, self.config.ffn_max, self.spec.bits))

    def meta(self) -> dict:
        return {
            "kind": "extracted",
            "spec": str(self.spec),
            "config": self.config.to_dict(),
            "kept": {k: list(map(int, v)) for k, v in self.kept.items()},
            "source": self.source,
            "vocab": {"blank": 0, "sos_eos": self.config.sos, "size": self.config.vocab},
        }

    def save(self, path: str | Path) -> int:
        return fileformat.write(path, self.meta(), self.tensors)

    @classmethod
    def from_container(cls, meta: Mapping, tensors) -> "ExtractedModel":
        if meta.get("kind") != "extracted":
            raise fileformat.FormatError(f"expected an extracted model, found {meta.get('kind')!r}")
        return cls(
            SubnetSpec.parse(meta["spec"]),
            EncoderConfig(**meta["config"]),
            dict(tensors),
            {k: list(v) for k, v in meta["kept"].items()},
            dict(meta.get("source", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExtractedModel":
        return cls.from_container(*fileformat.read(path))


def extract(model: SupernetModel, spec: SubnetSpec) -> ExtractedModel:
    """Physically slice one nested sub-network out of the supernet.

    The bottom ``spec.depth`` layers are copied, FFN tensors are cut down to
    the kept units, and every quantizable tensor is stored as integer codes
    at ``spec.bits`` with its per-bit-width scale.
    """
    if spec not in model.grid:
        raise SpecError(f"{spec} is not in the grid {model.grid.to_dict()}")
    master = model.master_weights()
    kept = kept_index_sets(master, model.config, spec, model.policy)
    tensors: dict[str, np.ndarray | IntTensor] = {}
    for name, _, quantizable in subnet_shapes(model.config, spec):
        w = master[name]
        module = ffn_width_of(name)
        if module is not None and spec.width < model.config.ffn_max:
            w = np.take(w, kept[module], axis=1 if name.endswith(".w2") else 0)
        if quantizable and spec.quantized:
            tensors[name] = export_int(w, float(model.params[scale_name(name, spec.bits)].data), spec.bits)
        else:
            tensors[name] = np.array(w)
    sub_config = dataclasses.replace(model.config, depth_max=spec.depth, ffn_max=spec.width)
    source = {
        "grid": model.grid.to_dict(),
        "step": model.training_meta.get("step", 0),
        "mode": model.training_meta.get("mode"),
        "policy": model.policy.value,
    }
    return ExtractedModel(spec, sub_config, tensors, {k: v.tolist() for k, v in kept.items()}, source)


def extract_all(model: SupernetModel, specs: Iterable[SubnetSpec] | None = None) -> dict[SubnetSpec, ExtractedModel]:
    return {s: extract(model, s) for s in (specs or model.specs())}
