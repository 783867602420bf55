"""Network families, parameter stores, and gradient verification.

Four convolutional families cover the whole pipeline:

* ``translator_gen`` - scale 1 image-to-image generator with instance norm,
  residual trunk and a tanh head.
* ``patch_disc`` - three stride-2 convs plus a 1-channel head; spatial /8,
  no sigmoid (least-squares adversarial objective).
* ``dsn`` - /4 degrader; a small conv trunk whose prediction is added to a
  hard bicubic /4 of the input, so it starts as (approximately) bicubic.
* ``srn`` - 4x upscaler; residual trunk without normalisation, two
  nearest+conv upsamples, plus a hard bicubic x4 residual.

Tensor compute is delegated to torch (CPU); everything around it -
parameter naming and initialisation, the forward/backward tape contract,
the optimizer, the finite-difference oracle - is explicit here so that
training state can be serialised bit-exactly and gradients can be audited
against an independent numerical check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, StaleTapeError, TrainingDivergenceError
from .imaging import resample_matrix
from .rng import Stream, derive_seed

FAMILIES = ("translator_gen", "patch_disc", "dsn", "srn")


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    base_channels: int = 16
    residual_blocks: int = 3
    scale_factor: Fraction = Fraction(1)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        expected = {
            "translator_gen": Fraction(1),
            "patch_disc": Fraction(1),
            "dsn": Fraction(1, 4),
            "srn": Fraction(4),
        }[self.family]
        object.__setattr__(self, "scale_factor", Fraction(self.scale_factor))
        if self.scale_factor != expected:
            raise ValueError(
                f"{self.family} requires scale_factor {expected}, "
                f"got {self.scale_factor}"
            )
        if self.base_channels < 1 or self.residual_blocks < 0:
            raise ValueError("base_channels >= 1 and residual_blocks >= 0 required")

    @staticmethod
    def for_family(family: str, base_channels: int = 16,
                   residual_blocks: int = 3) -> "NetworkSpec":
        scale = {"translator_gen": Fraction(1), "patch_disc": Fraction(1),
                 "dsn": Fraction(1, 4), "srn": Fraction(4)}[family]
        return NetworkSpec(family, base_channels, residual_blocks, scale)


class ParamStore:
    """Ordered named parameters with parallel gradient slots.

    Shapes are fixed at construction; ``version`` increments on every
    optimizer step so stale tapes can be detected.
    """

    def __init__(self, seed: int, dtype: torch.dtype = torch.float32):
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, torch.Tensor] = {}
        self.grads: dict[str, torch.Tensor] = {}
        self.version = 0

    def add(self, name: str, value: torch.Tensor) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = value.to(self.dtype).clone().requires_grad_(True)
        self.params[name] = t
        self.grads[name] = torch.zeros_like(t)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.zero_()

    def num_params(self) -> int:
        return sum(p.numel() for p in self.params.values())


@dataclass
class Tape:
    """Retained intermediates of one forward pass (the autograd graph)."""

    output: torch.Tensor
    x_leaf: torch.Tensor
    version: int
    consumed: bool = False


_tensor_mats: dict[tuple[int, int, torch.dtype], torch.Tensor] = {}


def _mat(n_in: int, n_out: int, dtype: torch.dtype) -> torch.Tensor:
    key = (n_in, n_out, dtype)
    m = _tensor_mats.get(key)
    if m is None:
        m = torch.from_numpy(resample_matrix(n_in, n_out)).to(dtype)
        _tensor_mats[key] = m
    return m


def bicubic_resize_tensor(x: torch.Tensor, scale: Fraction) -> torch.Tensor:
    """Catmull-Rom resample of an (N, C, H, W) tensor; linear, no clamping.

    Differentiable (two matmuls), so the adjoint used inside the hard
    residual heads comes for free.
    """
    h, w = x.shape[2], x.shape[3]
    oh, ow = int(scale * h), int(scale * w)
    if oh != scale * h or ow != scale * w or oh < 1 or ow < 1:
        raise DimensionError(f"scale {scale} does not divide {h}x{w}")
    rh = _mat(h, oh, x.dtype)
    rw = _mat(w, ow, x.dtype)
    return torch.matmul(torch.matmul(rh, x), rw.t())


class Network:
    """A built family: spec plus the pure apply function."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.plan = _layer_plan(spec)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        need = {"translator_gen": 4, "dsn": 4, "patch_disc": 8, "srn": 1}[self.spec.family]
        if h % need or w % need or h < need or w < need:
            raise DimensionError(
                f"{self.spec.family} needs H, W multiples of {need}, got {h}x{w}"
            )

    def apply(self, params: dict[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        fn = {"translator_gen": _apply_translator, "patch_disc": _apply_disc,
              "dsn": _apply_dsn, "srn": _apply_srn}[self.spec.family]
        return fn(self, params, x)

    def __call__(self, params: ParamStore, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.apply(params.params, x)


def _conv(p: dict, name: str, x: torch.Tensor, stride: int = 1) -> torch.Tensor:
    w = p[f"{name}.w"]
    return F.conv2d(x, w, p[f"{name}.b"], stride=stride,
                    padding=(w.shape[2] - 1) // 2)


def _rect(net: "Network", name: str, x: torch.Tensor,
          slope: float = 0.0) -> torch.Tensor:
    """Rectifier with an optional pre-activation recorder (grad-check aid)."""
    rec = getattr(net, "_recorder", None)
    if rec is not None:
        rec.append((name, x.detach()))
    return F.leaky_relu(x, slope) if slope else torch.relu(x)


def _inorm(p: dict, name: str, x: torch.Tensor) -> torch.Tensor:
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    xh = (x - mu) / torch.sqrt(var + 1e-5)
    return xh * p[f"{name}.g"].view(1, -1, 1, 1) + p[f"{name}.beta"].view(1, -1, 1, 1)


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


def _apply_translator(net: Network, p: dict, x: torch.Tensor) -> torch.Tensor:
    y = _rect(net, "stem", _inorm(p, "stem", _conv(p, "stem", x)))
    y = _rect(net, "down1", _inorm(p, "down1", _conv(p, "down1", y, stride=2)))
    y = _rect(net, "down2", _inorm(p, "down2", _conv(p, "down2", y, stride=2)))
    for r in range(net.spec.residual_blocks):
        z = _rect(net, f"res{r}a", _inorm(p, f"res{r}a", _conv(p, f"res{r}a", y)))
        z = _inorm(p, f"res{r}b", _conv(p, f"res{r}b", z))
        y = y + z
    y = _rect(net, "up1", _inorm(p, "up1", _conv(p, "up1", _up2(y))))
    y = _rect(net, "up2", _inorm(p, "up2", _conv(p, "up2", _up2(y))))
    return torch.tanh(_conv(p, "head", y))


def _apply_disc(net: Network, p: dict, x: torch.Tensor) -> torch.Tensor:
    y = _rect(net, "d1", _conv(p, "d1", x, stride=2), slope=0.2)
    y = _rect(net, "d2", _conv(p, "d2", y, stride=2), slope=0.2)
    y = _rect(net, "d3", _conv(p, "d3", y, stride=2), slope=0.2)
    return _conv(p, "head", y)


def _apply_dsn(net: Network, p: dict, x: torch.Tensor) -> torch.Tensor:
    y = _rect(net, "stem", _conv(p, "stem", x))
    y = _rect(net, "down1", _conv(p, "down1", y, stride=2))
    y = _rect(net, "down2", _conv(p, "down2", y, stride=2))
    pred = _conv(p, "head", y)
    return pred + bicubic_resize_tensor(x, Fraction(1, 4))


def _apply_srn(net: Network, p: dict, x: torch.Tensor) -> torch.Tensor:
    y = _rect(net, "stem", _conv(p, "stem", x))
    for r in range(net.spec.residual_blocks):
        z = _rect(net, f"res{r}a", _conv(p, f"res{r}a", y))
        z = _conv(p, f"res{r}b", z)
        y = y + z
    y = _rect(net, "up1", _conv(p, "up1", _up2(y)))
    y = _rect(net, "up2", _conv(p, "up2", _up2(y)))
    pred = _conv(p, "head", y)
    return pred + bicubic_resize_tensor(x, Fraction(4))


def _layer_plan(spec: NetworkSpec) -> list[tuple[str, int, int, int, bool]]:
    """(name, in_ch, out_ch, kernel, instance_norm) for each conv."""
    bc, r = spec.base_channels, spec.residual_blocks
    if spec.family == "translator_gen":
        plan = [("stem", 3, bc, 7, True), ("down1", bc, 2 * bc, 3, True),
                ("down2", 2 * bc, 4 * bc, 3, True)]
        for i in range(r):
            plan += [(f"res{i}a", 4 * bc, 4 * bc, 3, True),
                     (f"res{i}b", 4 * bc, 4 * bc, 3, True)]
        plan += [("up1", 4 * bc, 2 * bc, 3, True), ("up2", 2 * bc, bc, 3, True),
                 ("head", bc, 3, 7, False)]
    elif spec.family == "patch_disc":
        plan = [("d1", 3, bc, 4, False), ("d2", bc, 2 * bc, 4, False),
                ("d3", 2 * bc, 4 * bc, 4, False), ("head", 4 * bc, 1, 3, False)]
    elif spec.family == "dsn":
        plan = [("stem", 3, bc, 3, False), ("down1", bc, 2 * bc, 3, False),
                ("down2", 2 * bc, 2 * bc, 3, False), ("head", 2 * bc, 3, 3, False)]
    else:  # srn
        plan = [("stem", 3, bc, 3, False)]
        for i in range(r):
            plan += [(f"res{i}a", bc, bc, 3, False), (f"res{i}b", bc, bc, 3, False)]
        plan += [("up1", bc, bc, 3, False), ("up2", bc, bc, 3, False),
                 ("head", bc, 3, 3, False)]
    return plan


FLAT_STD = 0.02  # translator / discriminators: the classic GAN init

# fan-scaled gains for the norm-free families: straight-through convs,
# residual-branch convs, and the output head
FAMILY_GAINS = {
    "dsn": {"hidden": 1.4, "res": 1.4, "head": 0.02},
    "srn": {"hidden": 1.4, "res": 0.2, "head": 0.4},
}


def _init_std(family: str, name: str, fan_in: int) -> float:
    """Weight std for one conv layer.

    The translator and the patch discriminators use the flat 0.02 Gaussian
    convention: instance norm makes the translator's hidden weight scale
    irrelevant (the normalisation is exactly scale-invariant), and the
    shallow discriminators train fine from small weights.  The norm-free
    dsn/srn trunks instead need fan-scaled, signal-preserving weights on
    the straight-through path - a flat 0.02 collapses their activations
    multiplicatively and leaves the nets untrainable within the desk step
    budget.  The srn's residual branches start near zero (the usual
    small-residual trick), which biases its early learning toward the
    global, transferable corrections carried by the straight path, and its
    head starts at a magnitude the optimizer can shed quickly.
    """
    if family in ("translator_gen", "patch_disc"):
        return FLAT_STD
    gains = FAMILY_GAINS[family]
    if name == "head":
        gain = gains["head"]
    elif name.startswith("res"):
        gain = gains["res"]
    else:
        gain = gains["hidden"]
    return gain / np.sqrt(fan_in)


def build_network(spec: NetworkSpec, seed: int,
                  dtype: torch.dtype = torch.float32) -> tuple[Network, ParamStore]:
    """Construct a family and its deterministically initialised parameters.

    Conv weights are Gaussian with the per-family std from ``_init_std``;
    biases start at zero, norm scales at one.  Each parameter draws from
    its own stream derived from (seed, name), so initialisation does not
    depend on construction order.
    """
    net = Network(spec)
    store = ParamStore(seed, dtype)
    for name, cin, cout, k, norm in _layer_plan(spec):
        st = Stream(derive_seed(seed, "init", name))
        std = _init_std(spec.family, name, cin * k * k)
        w = st.normal((cout, cin, k, k)) * std
        store.add(f"{name}.w", torch.from_numpy(w))
        store.add(f"{name}.b", torch.zeros(cout, dtype=torch.float64))
        if norm:
            store.add(f"{name}.g", torch.ones(cout, dtype=torch.float64))
            store.add(f"{name}.beta", torch.zeros(cout, dtype=torch.float64))
    return net, store


def forward(net: Network, params: ParamStore, batch: torch.Tensor,
            retain: bool = False) -> tuple[torch.Tensor, Tape | None]:
    """Evaluate the network; with ``retain`` keep intermediates for backward."""
    if not retain:
        with torch.no_grad():
            return net.apply(params.params, batch), None
    x_leaf = batch.detach().clone().requires_grad_(True)
    y = net.apply(params.params, x_leaf)
    return y, Tape(output=y, x_leaf=x_leaf, version=params.version)


def backward(net: Network, params: ParamStore, tape: Tape,
             output_grad: torch.Tensor, param_grads: bool = True,
             input_grad: bool = True) -> torch.Tensor | None:
    """Adjoint of ``forward``: accumulate parameter grads, return input grad.

    The tape is single-use and bound to the parameter version it saw;
    reusing it, or using it after an optimizer step, raises StaleTapeError.
    """
    if tape.consumed:
        raise StaleTapeError("intermediates already consumed by a backward pass")
    if tape.version != params.version:
        raise StaleTapeError("parameters changed since forward; rerun forward")
    tape.consumed = True
    wrt: list[torch.Tensor] = []
    if param_grads:
        wrt.extend(params.tensors())
    if input_grad:
        wrt.append(tape.x_leaf)
    if not wrt:
        return None
    grads = torch.autograd.grad(tape.output, wrt, grad_outputs=output_grad)
    if param_grads:
        with torch.no_grad():
            for name, g in zip(params.names(), grads):
                params.grads[name] += g
    return grads[-1] if input_grad else None


def finite_difference_grads(apply_fn, params: dict[str, torch.Tensor],
                            x: torch.Tensor, eps: float,
                            order: int = 2) -> dict[str, torch.Tensor]:
    """Central finite differences of mean(apply_fn(params, x)) per parameter.

    ``order`` 2 is the classic two-point stencil (error O(eps^2)); order 4
    is the five-point central stencil (error O(eps^4)), which keeps the
    truncation error below every gradient scale in deep compositions.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, p in params.items():
            fd = torch.zeros_like(p)
            flat = p.view(-1)
            fd_flat = fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def loss_at(delta: float) -> float:
                    flat[i] = orig + delta
                    return apply_fn(params, x).mean().item()

                if order == 2:
                    est = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps)
                else:
                    est = (loss_at(-2 * eps) - 8.0 * loss_at(-eps)
                           + 8.0 * loss_at(eps) - loss_at(2 * eps)) / (12.0 * eps)
                flat[i] = orig
                fd_flat[i] = est
            out[name] = fd
    return out


def max_relative_grad_error(apply_fn, params: dict[str, torch.Tensor],
                            x: torch.Tensor, eps: float,
                            order: int = 2) -> float:
    """Max over parameters of |analytic - FD| / max(|analytic|, |FD|, 1e-8)."""
    x_leaf = x.detach().clone().requires_grad_(True)
    loss = apply_fn(params, x_leaf).mean()
    analytic = torch.autograd.grad(loss, list(params.values()))
    numeric = finite_difference_grads(apply_fn, params, x, eps, order=order)
    worst = 0.0
    for (name, fd), an in zip(numeric.items(), analytic):
        denom = torch.clamp(torch.maximum(an.abs(), fd.abs()), min=1e-8)
        worst = max(worst, float(((an - fd).abs() / denom).max()))
    return worst


MIN_SPECS = {
    "translator_gen": (2, 1),
    "patch_disc": (4, 0),
    "dsn": (4, 0),
    "srn": (4, 1),
}

_GRAD_CHECK_INPUT = {"translator_gen": 8, "patch_disc": 8, "dsn": 8, "srn": 4}


def set_generic_point(net: Network, store: ParamStore, seed: int) -> None:
    """Move parameters to a generic, well-scaled operating point.

    The training initialisation (std 0.02, zero biases) puts inner
    activations at ~1e-2, which is degenerate for an eps = 1e-3 central
    difference: normalisation denominators and rectifier kinks then sit at
    the same scale as the probe.  The adjoint property under test holds at
    every parameter value, so the check draws well-scaled weights and
    non-zero biases instead.

    Convs followed by instance norm get O(1) per-element weights: the norm
    makes them exactly scale-invariant, so larger magnitudes leave the
    activations untouched while shrinking the relative finite-difference
    truncation error (which goes as eps^2 / |w|^2 along the suppressed
    radial directions).
    """
    normed = {name for name, _cin, _cout, _k, norm in net.plan if norm}
    tanh_head = net.spec.family == "translator_gen"
    with torch.no_grad():
        for name, p in store.params.items():
            st = Stream(derive_seed(seed, "generic", name))
            if name.endswith(".w"):
                layer = name[:-2]
                fan_in = int(np.prod(p.shape[1:]))
                if layer in normed:
                    scale = 1.4
                elif tanh_head and layer == "head":
                    # keep the tanh out of saturation: saturated units have
                    # ~1e-8 gradients, which the relative-error floor turns
                    # into pure finite-difference noise
                    scale = 0.3 / np.sqrt(fan_in)
                else:
                    scale = 1.4 / np.sqrt(fan_in)
                draw = st.normal(tuple(p.shape)) * scale
            elif name.endswith(".g"):
                draw = 1.0 + 0.2 * st.normal(tuple(p.shape))
            else:  # bias / norm shift
                draw = 0.2 * st.normal(tuple(p.shape))
            p.copy_(torch.from_numpy(draw))
    store.version += 1


def clear_kink_margins(net: Network, store: ParamStore, x: torch.Tensor,
                       margin: float = 0.05, max_rounds: int = 64) -> None:
    """Shift biases until no rectifier pre-activation sits within ``margin``
    of its kink.

    A central difference with probe eps is only a valid derivative estimate
    while the function stays piecewise-smooth inside the probe; an eps of
    1e-3 can reach pre-activations up to a few 1e-3 away through the layer
    stack, so a comfortable margin keeps every probe inside one linear
    piece of each rectifier.  Layers are cleared front to back - an exact
    upward shift of the additive parameter (norm shift or conv bias) moves
    every offending channel clear, and earlier layers do not depend on
    later parameters, so the sweep terminates.
    """
    with torch.no_grad():
        for _ in range(max_rounds):
            net._recorder = []
            try:
                net.apply(store.params, x)
                records = list(net._recorder)
            finally:
                del net._recorder
            shifted = False
            for name, z in records:  # forward order
                per_channel_min_abs = z.abs().amin(dim=(0, 2, 3))
                offending = torch.nonzero(
                    per_channel_min_abs < margin).flatten().tolist()
                if not offending:
                    continue
                target = f"{name}.beta" if f"{name}.beta" in store.params \
                    else f"{name}.b"
                for c in offending:
                    low, high = float(z[:, c].min()), float(z[:, c].max())
                    up = 1.2 * margin - low       # push fully positive
                    down = -(high + 1.2 * margin)  # or fully negative
                    store.params[target][c] += up if abs(up) <= abs(down) else down
                shifted = True
                break  # re-run the forward before touching later layers
            if not shifted:
                return
    raise RuntimeError("could not clear rectifier kink margins")


def grad_check(spec: NetworkSpec, seed: int = 0, eps: float = 1e-3) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Runs in 64-bit at a generic parameter point (see ``set_generic_point``)
    whose rectifier pre-activations keep a safety margin from their kinks,
    so the eps-probe stays inside a smooth region.  The numerical side is
    the fourth-order central stencil at step ``eps``, keeping truncation
    well below the 1e-4 gate even for gradients that are small through
    cancellation.  The spec must stay tiny (<= 10k parameters): the check
    evaluates four forwards per parameter element.
    """
    net, store = build_network(spec, seed, dtype=torch.float64)
    if store.num_params() > 10_000:
        raise ValueError(f"grad_check needs <= 10k params, got {store.num_params()}")
    set_generic_point(net, store, derive_seed(seed, "point"))
    side = _GRAD_CHECK_INPUT[spec.family]
    st = Stream(derive_seed(seed, "grad-check-input"))
    x = torch.from_numpy(st.normal((1, 3, side, side)) * 0.5).to(torch.float64)
    clear_kink_margins(net, store, x)
    return max_relative_grad_error(lambda p, xx: net.apply(p, xx),
                                   store.params, x, eps, order=4)


@dataclass
class OptimizerState:
    """Adam state: per-parameter moments plus the shared scalar knobs."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @staticmethod
    def for_params(params: ParamStore, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.params.items():
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        return state


def opt_step(params: ParamStore, state: OptimizerState,
             grads: dict[str, torch.Tensor] | None = None) -> None:
    """One adaptive-moment update with bias correction, in place."""
    if grads is None:
        grads = params.grads
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.params.items():
            g = grads[name]
            m = state.m[name]
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    params.version += 1
