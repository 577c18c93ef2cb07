"""Training-scheme flags: which variables are quantized and how.

``standard`` and ``proposed`` are the two named presets.  Intermediate
ablation rows are plain flag combinations (see ``ABLATION_ROWS``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .batchnorm import VARIANTS
from .tensor import BOOL1, F16, F32, StorageDtype, parse_dtype

ACTIVATIONS = ("identity", "hardtanh", "relu")
KERNELS = ("float", "bit")


@dataclass(frozen=True)
class Scheme:
    dW_dtype: StorageDtype = F32
    dY_dtype: StorageDtype = F32
    bn_variant: str = "l2"
    base_dtype: StorageDtype = F32
    binary: bool = True
    activation: str = "identity"  # non-binary reference mode only
    kernels: str = "float"
    attenuate: bool = True        # divide binary dW by sqrt(fan_in)

    def __post_init__(self):
        for name in ("dW_dtype", "dY_dtype", "base_dtype"):
            object.__setattr__(self, name, parse_dtype(getattr(self, name)))
        if self.dW_dtype.kind not in ("f32", "f16", "bool1"):
            raise ValueError(f"dW dtype must be f32, f16 or bool, got {self.dW_dtype}")
        if self.dY_dtype.kind not in ("f32", "f16", "po2", "blockfp"):
            raise ValueError(f"dY dtype must be f32, f16, po2_k or blockfp_k, got {self.dY_dtype}")
        if self.base_dtype.kind not in ("f32", "f16"):
            raise ValueError(f"base dtype must be f32 or f16, got {self.base_dtype}")
        if self.bn_variant not in VARIANTS:
            raise ValueError(f"bn variant must be one of {VARIANTS}, got {self.bn_variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.binary and self.activation != "identity":
            raise ValueError("activation applies to the non-binary reference mode only; "
                             "binary layers always use sgn")
        if self.kernels not in KERNELS:
            raise ValueError(f"kernels must be one of {KERNELS}")

    @property
    def retains_x(self) -> bool:
        """Whether high-precision X is kept for the backward pass."""
        return not self.binary or self.bn_variant != "l1_bnn"

    @property
    def x_dtype(self) -> StorageDtype:
        return self.base_dtype if self.retains_x else BOOL1

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("dW_dtype", "dY_dtype", "base_dtype"):
            d[k] = getattr(self, k).name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scheme":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scheme keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "Scheme":
        return replace(self, **kw)


STANDARD = Scheme()
PROPOSED = Scheme(dW_dtype=BOOL1, dY_dtype="po2_5", bn_variant="l1_bnn", base_dtype=F16)
PRESETS = {"standard": STANDARD, "proposed": PROPOSED}

# The sequence of ablation rows from all-f32 to the full proposal.
ABLATION_ROWS = {
    "f32": STANDARD,
    "f16": Scheme(dW_dtype=F16, dY_dtype=F16, base_dtype=F16),
    "bool_dW": Scheme(dW_dtype=BOOL1, dY_dtype=F16, base_dtype=F16),
    "int5_dY": Scheme(dW_dtype=BOOL1, dY_dtype="blockfp_5", base_dtype=F16),
    "po2_dY": Scheme(dW_dtype=BOOL1, dY_dtype="po2_5", base_dtype=F16),
    "l1": Scheme(dW_dtype=BOOL1, dY_dtype="po2_5", bn_variant="l1", base_dtype=F16),
    "l1_bnn": PROPOSED,
}


def resolve(preset_or_scheme) -> Scheme:
    if isinstance(preset_or_scheme, Scheme):
        return preset_or_scheme
    if isinstance(preset_or_scheme, dict):
        return Scheme.from_dict(preset_or_scheme)
    name = str(preset_or_scheme)
    if name in PRESETS:
        return PRESETS[name]
    raise ValueError(f"unknown scheme {name!r}; presets are {sorted(PRESETS)}")
