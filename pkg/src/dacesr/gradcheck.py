"""
Finite-difference checks of every analytic or autograd gradient the
networks rely on.  All checks run in double precision.
"""

from __future__ import annotations
from collections.abc import Callable, Iterator, Sequence
import attr
import numpy as np
import torch
from torch import Tensor
from .config import NetworkConfig
from .ree import Encoder, LoraAdapter, rep_mse_loss
from .srnet import SRNet, net_backward, pixel_shuffle
from .ssm import SelectiveScanFn, SsmParams, selective_scan, selective_scan_backward
from .training import perceptual_proxy_loss
from .util import log, substream, torch_seeded

#: Central-difference step
EPS = 1e-6

#: Largest accepted relative error
TOLERANCE = 1e-4


def numerical_grad(f: Callable[[], float], x: Tensor, index: tuple[int, ...]) -> float:
    """Central difference of ``f`` in the coordinate ``x[index]`` (restored afterwards)"""
    with torch.no_grad():
        orig = float(x[index])
        x[index] = orig + EPS
        up = f()
        x[index] = orig - EPS
        down = f()
        x[index] = orig
    return (up - down) / (2 * EPS)


def rel_error(analytic: Sequence[float], numeric: Sequence[float]) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
    return float(np.linalg.norm(a - n)) / scale


def _coords(x: Tensor, k: int, rng: np.random.Generator) -> Iterator[tuple[int, ...]]:
    flat = rng.choice(x.numel(), size=min(k, x.numel()), replace=False)
    for i in flat:
        yield tuple(int(j) for j in np.unravel_index(int(i), tuple(x.shape)))


def _compare(
    f: Callable[[], float],
    tensors: Sequence[tuple[Tensor, Tensor]],
    per_tensor: int,
    rng: np.random.Generator,
) -> float:
    """Relative error of analytic gradients over sampled coordinates of each ``(x, grad)``"""
    analytic: list[float] = []
    numeric: list[float] = []
    for x, g in tensors:
        for idx in _coords(x, per_tensor, rng):
            analytic.append(float(g[idx]))
            numeric.append(numerical_grad(f, x, idx))
    return rel_error(analytic, numeric)


@attr.define
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def random_ssm_params(rng: np.random.Generator, d: int, n: int, selective: bool = True) -> SsmParams:
    def t(*shape: int, scale: float = 1.0) -> Tensor:
        return torch.from_numpy(rng.standard_normal(shape) * scale)

    return SsmParams(
        A=-torch.from_numpy(rng.uniform(0.1, 2.0, size=(d, n))),
        delta_weight=t(d, d, scale=0.3) if selective else torch.zeros(0, dtype=torch.float64),
        delta_bias=t(d, scale=0.5),
        b_weight=t(n, d) if selective else t(n),
        c_weight=t(n, d) if selective else t(n),
        selective=selective,
    )


def check_scan_backward(instances: int = 20, seed: int = 0) -> CheckResult:
    """Hand-derived selective scan backward against central differences"""
    worst = 0.0
    for k in range(instances):
        rng = substream(seed, "scan", k)
        length = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 9))
        params = random_ssm_params(rng, d, n, selective=k % 4 != 3)
        x = torch.from_numpy(rng.standard_normal((length, d)))
        gy = torch.from_numpy(rng.standard_normal((length, d)))
        _, state = selective_scan(x, params)
        grads = selective_scan_backward(gy, state)

        def f() -> float:
            return float((selective_scan(x, params)[0] * gy).sum())

        pairs = [(x, grads.x), (params.A, grads.A), (params.delta_bias, grads.delta_bias)]
        pairs += [(params.b_weight, grads.b_weight), (params.c_weight, grads.c_weight)]
        if params.selective:
            pairs.append((params.delta_weight, grads.delta_weight))
        worst = max(worst, _compare(f, pairs, 6, rng))
    return CheckResult("selective_scan_backward", instances, worst)


def check_scan_autograd(instances: int = 20, seed: int = 0) -> CheckResult:
    """The recurrence as seen by autograd, through `SelectiveScanFn`"""
    worst = 0.0
    for k in range(instances):
        rng = substream(seed, "scan-autograd", k)
        b = 1 + k % 2
        length = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        inputs = [
            torch.from_numpy(rng.standard_normal((b, length, d))),
            torch.from_numpy(rng.uniform(0.05, 1.0, size=(b, length, d))),
            torch.from_numpy(-rng.uniform(0.1, 2.0, size=(d, n))),
            torch.from_numpy(rng.standard_normal((b, length, n))),
            torch.from_numpy(rng.standard_normal((b, length, n))),
        ]
        gy = torch.from_numpy(rng.standard_normal((b, length, d)))
        leaves = [t.clone().requires_grad_(True) for t in inputs]
        grads = torch.autograd.grad((SelectiveScanFn.apply(*leaves) * gy).sum(), leaves)

        def f() -> float:
            with torch.no_grad():
                return float((SelectiveScanFn.apply(*inputs) * gy).sum())

        worst = max(worst, _compare(f, list(zip(inputs, grads)), 4, rng))
    return CheckResult("selective_scan_autograd", instances, worst)


def desk_network_config() -> NetworkConfig:
    return NetworkConfig(
        n_rssb=2,
        vimm_per_rssb=2,
        channels=8,
        state_size=4,
        cond_channels=4,
        scale=2,
    )


def _raw_output(model: SRNet, lr: Tensor, cond: Tensor) -> Tensor:
    # Unclamped network output; clamping is not differentiable at the bounds
    return pixel_shuffle(model.head(model.features(lr, cond)), model.config.scale)


def check_net_backward(instances: int = 20, seed: int = 0) -> CheckResult:
    """Parameter gradients of the whole network (two blocks) against central differences"""
    config = desk_network_config()
    worst = 0.0
    for k in range(instances):
        rng = substream(seed, "net", k)
        with torch_seeded(seed, "net", k):
            model = SRNet(config).double()
        # Perturb the identity-initialized modulation so it is exercised
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * 0.05))
        lr = torch.from_numpy(rng.uniform(0, 1, size=(1, 3, 8, 8)))
        cond = torch.from_numpy(rng.standard_normal((1, config.cond_channels, 1, 1)))
        out = _raw_output(model, lr, cond)
        g_out = torch.from_numpy(rng.standard_normal(tuple(out.shape)))
        grads = net_backward(out, g_out, model)

        def f() -> float:
            with torch.no_grad():
                return float((_raw_output(model, lr, cond) * g_out).sum())

        named = dict(model.named_parameters())
        picks = rng.choice(sorted(named), size=min(8, len(named)), replace=False)
        pairs = [(named[str(n)].data, grads[str(n)]) for n in picks]
        worst = max(worst, _compare(f, pairs, 3, rng))
    return CheckResult("net_backward", instances, worst)


def _desk_encoder(rng: np.random.Generator, seed: int, k: int) -> tuple[Encoder, LoraAdapter]:
    with torch_seeded(seed, "encoder", k):
        base = Encoder(embed_dim=8).double()
        adapter = LoraAdapter(base, rank=2).double()
    with torch.no_grad():
        for p in adapter.downs:
            p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * 0.1))
    base.requires_grad_(False)
    return base, adapter


def check_adapter_grads(instances: int = 20, seed: int = 0) -> CheckResult:
    """Embedding loss gradients with respect to the LoRA factors"""
    worst = 0.0
    for k in range(instances):
        rng = substream(seed, "adapter", k)
        base, adapter = _desk_encoder(rng, seed, k)
        clean = torch.from_numpy(rng.uniform(0, 1, size=(2, 3, 16, 16)))
        degraded = torch.from_numpy(rng.uniform(0, 1, size=(2, 3, 16, 16)))
        target = base.embed(clean)
        loss = rep_mse_loss(target, base.embed(degraded, adapter))
        params = [*adapter.downs, *adapter.ups]
        grads = torch.autograd.grad(loss, params)

        def f() -> float:
            with torch.no_grad():
                return float(rep_mse_loss(target, base.embed(degraded, adapter)))

        pairs = [(p.data, g) for p, g in zip(params, grads)]
        worst = max(worst, _compare(f, pairs, 3, rng))
    return CheckResult("adapter_grads", instances, worst)


def check_perceptual_grads(instances: int = 20, seed: int = 0) -> CheckResult:
    """Perceptual proxy loss gradient with respect to the super-resolved image"""
    worst = 0.0
    for k in range(instances):
        rng = substream(seed, "perceptual", k)
        base, _ = _desk_encoder(rng, seed, k)
        hr = torch.from_numpy(rng.uniform(0, 1, size=(1, 3, 16, 16)))
        sr = torch.from_numpy(rng.uniform(0, 1, size=(1, 3, 16, 16))).requires_grad_(True)
        (grad,) = torch.autograd.grad(perceptual_proxy_loss(sr, hr, base), [sr])
        x = sr.detach().clone()

        def f() -> float:
            with torch.no_grad():
                return float(perceptual_proxy_loss(x, hr, base))

        worst = max(worst, _compare(f, [(x, grad)], 12, rng))
    return CheckResult("perceptual_proxy", instances, worst)


#: Every check, in report order
CHECKS: dict[str, Callable[[int, int], CheckResult]] = {
    "selective_scan_backward": check_scan_backward,
    "selective_scan_autograd": check_scan_autograd,
    "net_backward": check_net_backward,
    "adapter_grads": check_adapter_grads,
    "perceptual_proxy": check_perceptual_grads,
}


def run_checks(
    names: Sequence[str] | None = None, instances: int = 20, seed: int = 0
) -> list[CheckResult]:
    results = []
    for name in names or list(CHECKS):
        r = CHECKS[name](instances, seed)
        log.info(
            "Gradient check %s: max relative error %.3g over %d instances (%s)",
            r.name,
            r.max_rel_error,
            r.instances,
            "ok" if r.ok else "FAILED",
        )
        results.append(r)
    return results
