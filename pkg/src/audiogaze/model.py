"""Model configuration and the learnable parameter container."""

from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffcore import Tensor
from .errors import ConfigError

ATTN_HEADS = ("none", "residual_mlp")
INIT_POINTS = ("salient", "center")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    hidden: int = 64  # GRU width h
    key_dim: int = 32  # attention width k
    mlp_hidden: int = 32  # force-MLP width m
    use_salience: bool = True
    use_dyns: bool = True
    use_gru: bool = True
    attn_head: str = "none"
    init_point: str = "salient"
    clamp: bool = True

    def __post_init__(self):
        for name in ("embed_dim", "hidden", "key_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.attn_head not in ATTN_HEADS:
            raise ConfigError(f"attn_head must be one of {ATTN_HEADS}")
        if self.init_point not in INIT_POINTS:
            raise ConfigError(f"init_point must be one of {INIT_POINTS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# variant name -> ModelConfig overrides
VARIANTS = {
    "full": {},
    "no-salience": {"use_salience": False},
    "no-dyns": {"use_dyns": False},
    "no-gru": {"use_gru": False},
    "no-pdloss": {},
}

GROUPS = {
    "mlp_a": "dyn.A.",
    "mlp_b": "dyn.B.",
    "mlp_c": "dyn.C.",
    "alpha": "dyn.alpha_logit",
    "gru": "gru.",
    "w_in": "enc.",
    "w_q": "attn.W_q",
    "w_k": "attn.W_k",
}


def _shapes(cfg):
    d, h, k, m = cfg.embed_dim, cfg.hidden, cfg.key_dim, cfg.mlp_hidden
    shapes = {
        "enc.W_in": (d, h),
        "enc.b_in": (h,),
        "attn.W_q": (h, k),
        "attn.W_k": (d, k),
    }
    if cfg.use_gru:
        for g in "zrn":
            shapes[f"gru.W_{g}"] = (h, h)
            shapes[f"gru.U_{g}"] = (h, h)
            shapes[f"gru.b_{g}"] = (h,)
    if cfg.attn_head == "residual_mlp":
        shapes.update({"head.W1": (2, m), "head.b1": (m,),
                       "head.W2": (m, 2), "head.b2": (2,)})
    for name in "ABC":
        shapes.update({
            f"dyn.{name}.W1": (2, m), f"dyn.{name}.b1": (m,),
            f"dyn.{name}.W2": (m, 2), f"dyn.{name}.b2": (2,),
        })
    shapes["dyn.alpha_logit"] = ()
    return shapes


class ModelParams:
    """Named float64 leaf tensors plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if len(shape) == 2:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-bound, bound, size=shape)
                if name.startswith(("dyn.", "head.")) and leaf == "W2":
                    value *= 0.1  # start near a zero force field
            else:
                value = np.zeros(shape)
            tensors[name] = Tensor(value, requires_grad=True)
        if not config.use_dyns:
            # The feedforward merge outputs positions, not forces. Starting at the
            # image center keeps it off the clamp, where the gradient is zero.
            for name in ("dyn.B.b2", "dyn.C.b2"):
                tensors[name].value[:] = 0.5
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config):
        return cls(config, {n: Tensor(np.zeros(s), requires_grad=True)
                            for n, s in _shapes(config).items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    @property
    def alpha(self):
        return float(1.0 / (1.0 + np.exp(-self.tensors["dyn.alpha_logit"].value)))

    def group(self, group):
        prefix = GROUPS[group]
        return [t for n, t in self.tensors.items() if n.startswith(prefix)]

    def copy(self):
        return ModelParams(self.config, {
            n: Tensor(t.value.copy(), requires_grad=True) for n, t in self.tensors.items()})

    def state(self):
        return {n: t.value.copy() for n, t in self.tensors.items()}

    def load_state(self, state):
        for n, t in self.tensors.items():
            v = np.asarray(state[n], dtype=np.float64).reshape(t.shape)
            t.value = v.copy()

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "tensors": {
                n: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
                for n, t in self.tensors.items()
            },
        }

    @classmethod
    def from_dict(cls, doc):
        config = ModelConfig.from_dict(doc["config"])
        expected = _shapes(config)
        tensors = {}
        for name, shape in expected.items():
            entry = doc["tensors"][name]
            if tuple(entry["shape"]) != shape:
                raise ConfigError(f"checkpoint tensor {name}: shape {entry['shape']} != {shape}")
            value = np.array(entry["values"], dtype=np.float64).reshape(shape)
            tensors[name] = Tensor(value, requires_grad=True)
        return cls(config, tensors)
