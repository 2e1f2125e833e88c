"""
State-space core: zero-order-hold discretization, the selective scan with an
analytic reverse pass, and the Vision Mamba block built on it.

State matrices are diagonal per channel: ``A`` has shape ``(D, N)`` and its
entries are the diagonals of ``D`` independent ``N × N`` state matrices.
"""

from __future__ import annotations
import math
from typing import Any, Optional
import attr
import torch
from torch import Tensor, nn
import torch.nn.functional as F
from .consts import CONV1D_WIDTH, DELTA_INIT_RANGE, ZOH_SERIES_CUTOFF
from .errors import InternalError, ParameterError


def _as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _check_delta(delta: Tensor) -> None:
    if not bool((delta > 0).all()):
        raise ParameterError("Discretization step Δ must be positive")


def zoh_input_gain(delta: Tensor, a: Tensor) -> Tensor:
    """
    Elementwise ``(exp(Δa) - 1) / a``, the factor turning ``B`` into ``B̄``,
    with its series expansion where ``|Δa|`` is tiny
    """
    x = delta * a
    small = x.abs() < ZOH_SERIES_CUTOFF
    safe_a = torch.where(small, torch.ones_like(a), a)
    exact = torch.expm1(x) / safe_a
    series = delta * (1 + x / 2 + x * x / 6)
    return torch.where(small, series, exact)


def discretize_zoh(
    A: Any, B: Any, delta: Any, diagonal: bool = True
) -> tuple[Tensor, Tensor]:
    """
    Zero-order-hold discretization: ``Ā = exp(ΔA)`` and
    ``B̄ = (ΔA)⁻¹(exp(ΔA) - I)·ΔB``.

    With ``diagonal`` (the default) ``A`` holds diagonal entries and all
    arguments broadcast elementwise.  Otherwise ``A`` is a dense ``N × N``
    matrix, ``B`` is ``N`` or ``N × k``, ``delta`` is a scalar, and both
    results come from one exponential of the block matrix ``[[A, B], [0, 0]]``
    (which stays valid for singular ``A``).
    """
    A = _as_tensor(A)
    B = _as_tensor(B, A)
    delta = _as_tensor(delta, A)
    _check_delta(delta)
    if diagonal:
        return torch.exp(delta * A), zoh_input_gain(delta, A) * B
    n = A.shape[-1]
    if A.shape != (n, n):
        raise ParameterError(f"Dense state matrix must be square, got {tuple(A.shape)}")
    vector = B.ndim == 1
    Bm = B.unsqueeze(-1) if vector else B
    k = Bm.shape[-1]
    block = torch.zeros((n + k, n + k), dtype=A.dtype)
    block[:n, :n] = A
    block[:n, n:] = Bm
    expd = torch.linalg.matrix_exp(delta * block)
    A_bar = expd[:n, :n]
    B_bar = expd[:n, n:]
    return A_bar, (B_bar.squeeze(-1) if vector else B_bar)


def ssm_step(
    h: Tensor, x_t: Any, A_bar: Tensor, B_bar: Tensor, C: Tensor
) -> tuple[Tensor, Tensor]:
    """One step of ``h ← Āh + B̄x``, ``y = Ch``"""
    if A_bar.ndim == h.ndim + 1:
        h_next = A_bar @ h + B_bar * x_t
    else:
        h_next = A_bar * h + B_bar * x_t
    return h_next, (C * h_next).sum(-1)


@attr.define
class RecurrenceState:
    """Tensors kept by the recurrence for its reverse pass"""

    u: Tensor
    delta: Tensor
    A: Tensor
    B: Tensor
    C: Tensor
    A_bar: Tensor
    gain: Tensor
    #: Hidden states h_{-1} .. h_{L-1}, shape (batch, L + 1, D, N)
    h: Tensor


def scan_recurrence(
    u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor
) -> tuple[Tensor, RecurrenceState]:
    """
    Run the discretized recurrence left to right.

    Shapes: ``u`` and ``delta`` are (batch, L, D), ``A`` is (D, N), ``B`` and
    ``C`` are (batch, L, N).  Returns ``y`` of shape (batch, L, D).
    """
    batch, length, dim = u.shape
    n = A.shape[1]
    A_bar = torch.exp(delta.unsqueeze(-1) * A)
    gain = zoh_input_gain(delta.unsqueeze(-1), A)
    drive = gain * B.unsqueeze(2) * u.unsqueeze(-1)
    h = u.new_zeros((batch, length + 1, dim, n))
    for t in range(length):
        h[:, t + 1] = A_bar[:, t] * h[:, t] + drive[:, t]
    y = torch.einsum("bldn,bln->bld", h[:, 1:], C)
    return y, RecurrenceState(u, delta, A, B, C, A_bar, gain, h)


def scan_recurrence_backward(
    grad_y: Tensor, state: RecurrenceState
) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """
    Reverse-time pass of `scan_recurrence`.  Returns the gradients for
    ``(u, delta, A, B, C)``.
    """
    if grad_y.shape != state.u.shape:
        raise InternalError(
            f"Upstream gradient shape {tuple(grad_y.shape)} does not match scan"
            f" output shape {tuple(state.u.shape)}"
        )
    u, delta, A, B, C = state.u, state.delta, state.A, state.B, state.C
    A_bar, gain, h = state.A_bar, state.gain, state.h
    length = u.shape[1]
    # ∂L/∂h_t, accumulated right to left
    gh = torch.zeros_like(h[:, 1:])
    direct = grad_y.unsqueeze(-1) * C.unsqueeze(2)
    carry = torch.zeros_like(h[:, 0])
    for t in range(length - 1, -1, -1):
        carry = direct[:, t] + carry
        gh[:, t] = carry
        carry = A_bar[:, t] * carry
    grad_C = torch.einsum("bld,bldn->bln", grad_y, h[:, 1:])
    grad_A_bar = gh * h[:, :-1]
    Bu = B.unsqueeze(2) * u.unsqueeze(-1)
    grad_gain = gh * Bu
    grad_B = torch.einsum("bldn,bldn,bld->bln", gh, gain, u)
    grad_u = torch.einsum("bldn,bldn,bln->bld", gh, gain, B)

    d = delta.unsqueeze(-1)
    x = d * A
    small = x.abs() < ZOH_SERIES_CUTOFF
    safe_a = torch.where(small, torch.ones_like(A), A).expand_as(x)
    dgain_ddelta = torch.where(small, 1 + x + x * x / 2, A_bar)
    dgain_da = torch.where(
        small, d * d / 2 + A * d**3 / 3, (d * A_bar - gain) / safe_a
    )
    grad_delta = (grad_A_bar * A * A_bar + grad_gain * dgain_ddelta).sum(-1)
    grad_A = (grad_A_bar * d * A_bar + grad_gain * dgain_da).sum(dim=(0, 1))
    return grad_u, grad_delta, grad_A, grad_B, grad_C


class SelectiveScanFn(torch.autograd.Function):
    """Exposes the analytic reverse pass of the recurrence to autograd"""

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Any, u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor
    ) -> Tensor:
        y, state = scan_recurrence(u, delta, A, B, C)
        # Saved tensors are version-checked by autograd at backward time
        ctx.save_for_backward(*attr.astuple(state, recurse=False))
        return y

    @staticmethod
    def backward(ctx: Any, grad_y: Tensor) -> tuple[Tensor, ...]:  # type: ignore[override]
        saved = ctx.saved_tensors
        if len(saved) != len(attr.fields(RecurrenceState)):
            raise InternalError("Selective scan backward called without a forward pass")
        return scan_recurrence_backward(grad_y.contiguous(), RecurrenceState(*saved))


@attr.define
class SsmParams:
    """
    Parameters of one selective state-space layer over ``D`` channels with
    state size ``N``.

    Selective layers derive ``Δ``, ``B`` and ``C`` from each token:
    ``Δ = softplus(x·Wδᵀ + bδ)``, ``B = x·W_Bᵀ``, ``C = x·W_Cᵀ`` with
    ``delta_weight`` (D, D), ``b_weight`` and ``c_weight`` (N, D).
    Time-invariant layers ignore ``delta_weight`` and use ``b_weight`` and
    ``c_weight`` of shape (N,) for every token.
    """

    A: Tensor
    delta_weight: Tensor
    delta_bias: Tensor
    b_weight: Tensor
    c_weight: Tensor
    selective: bool = True

    @property
    def state_size(self) -> int:
        return int(self.A.shape[1])

    @property
    def channels(self) -> int:
        return int(self.A.shape[0])

    def check(self) -> None:
        d, n = self.A.shape
        if not bool((self.A <= 0).all()):
            raise ParameterError("State matrix diagonals must be nonpositive")
        expected_bc = (n, d) if self.selective else (n,)
        if (
            self.delta_bias.shape != (d,)
            or self.b_weight.shape != expected_bc
            or self.c_weight.shape != expected_bc
            or (self.selective and self.delta_weight.shape != (d, d))
        ):
            raise ParameterError("Inconsistent state-space parameter shapes")


@attr.define
class ScanState:
    """Everything `selective_scan_backward` needs from the forward pass"""

    x: Tensor
    params: SsmParams
    delta_raw: Tensor
    recurrence: RecurrenceState
    unbatched: bool


@attr.define
class ScanGrads:
    x: Tensor
    A: Tensor
    delta_weight: Tensor
    delta_bias: Tensor
    b_weight: Tensor
    c_weight: Tensor


def _project(x: Tensor, params: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    batch, length, _ = x.shape
    n = params.state_size
    if params.selective:
        delta_raw = x @ params.delta_weight.T + params.delta_bias
        B = x @ params.b_weight.T
        C = x @ params.c_weight.T
    else:
        delta_raw = params.delta_bias.expand_as(x)
        B = params.b_weight.expand(batch, length, n)
        C = params.c_weight.expand(batch, length, n)
    return delta_raw, B, C


def selective_scan(x_seq: Tensor, params: SsmParams) -> tuple[Tensor, ScanState]:
    """
    Run a selective state-space layer over a token sequence ``x_seq`` of
    shape (L, D) or (batch, L, D), left to right.  Returns the outputs and
    the state needed for `selective_scan_backward`.
    """
    params.check()
    unbatched = x_seq.ndim == 2
    x = x_seq.unsqueeze(0) if unbatched else x_seq
    if x.ndim != 3 or x.shape[1] == 0:
        raise ParameterError(f"Cannot scan a token sequence of shape {tuple(x_seq.shape)}")
    if x.shape[2] != params.channels:
        raise ParameterError(
            f"Tokens have {x.shape[2]} channels but the layer expects {params.channels}"
        )
    with torch.no_grad():
        delta_raw, B, C = _project(x, params)
        y, rec = scan_recurrence(x, F.softplus(delta_raw), params.A, B, C)
    state = ScanState(x=x, params=params, delta_raw=delta_raw, recurrence=rec, unbatched=unbatched)
    return (y.squeeze(0) if unbatched else y), state


def selective_scan_backward(grad_y_seq: Tensor, state: Optional[ScanState]) -> ScanGrads:
    if state is None:
        raise InternalError("No saved forward state for the selective scan")
    gy = grad_y_seq.unsqueeze(0) if state.unbatched else grad_y_seq
    p = state.params
    x = state.x
    with torch.no_grad():
        g_u, g_delta, g_A, g_B, g_C = scan_recurrence_backward(gy, state.recurrence)
        g_raw = g_delta * torch.sigmoid(state.delta_raw)
        if p.selective:
            g_x = g_u + g_raw @ p.delta_weight + g_B @ p.b_weight + g_C @ p.c_weight
            g_dw = torch.einsum("bld,ble->de", g_raw, x)
            g_bw = torch.einsum("bln,bld->nd", g_B, x)
            g_cw = torch.einsum("bln,bld->nd", g_C, x)
        else:
            g_x = g_u
            g_dw = torch.zeros_like(p.delta_weight)
            g_bw = g_B.sum(dim=(0, 1))
            g_cw = g_C.sum(dim=(0, 1))
        g_db = g_raw.sum(dim=(0, 1))
    return ScanGrads(
        x=g_x.squeeze(0) if state.unbatched else g_x,
        A=g_A,
        delta_weight=g_dw,
        delta_bias=g_db,
        b_weight=g_bw,
        c_weight=g_cw,
    )


def _inverse_softplus(y: Tensor) -> Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveSsm(nn.Module):
    """Trainable selective state-space layer (diagonal ``A = -exp(a_log)``)"""

    def __init__(self, channels: int, state_size: int, selective: bool = True) -> None:
        super().__init__()
        self.selective = selective
        self.a_log = nn.Parameter(
            torch.log(torch.arange(1, state_size + 1, dtype=torch.float32)).repeat(
                channels, 1
            )
        )
        lo, hi = DELTA_INIT_RANGE
        dt = torch.exp(
            torch.rand(channels) * (math.log(hi) - math.log(lo)) + math.log(lo)
        )
        self.delta_bias = nn.Parameter(_inverse_softplus(dt))
        if selective:
            self.delta_weight = nn.Parameter(
                torch.randn(channels, channels) * channels**-0.5 * 0.1
            )
            self.b_weight = nn.Parameter(torch.randn(state_size, channels) * channels**-0.5)
            self.c_weight = nn.Parameter(torch.randn(state_size, channels) * channels**-0.5)
        else:
            self.register_parameter("delta_weight", None)
            self.b_weight = nn.Parameter(torch.ones(state_size))
            self.c_weight = nn.Parameter(torch.randn(state_size) * state_size**-0.5)

    def params(self) -> SsmParams:
        dw = self.delta_weight if self.delta_weight is not None else self.delta_bias.new_zeros(0)
        return SsmParams(
            A=-torch.exp(self.a_log),
            delta_weight=dw,
            delta_bias=self.delta_bias,
            b_weight=self.b_weight,
            c_weight=self.c_weight,
            selective=self.selective,
        )

    def forward(self, x: Tensor) -> Tensor:
        p = self.params()
        delta_raw, B, C = _project(x, p)
        return SelectiveScanFn.apply(x, F.softplus(delta_raw), p.A, B, C)


class CausalConv1d(nn.Module):
    """Depthwise convolution along the token axis that never looks ahead"""

    def __init__(self, channels: int, width: int = CONV1D_WIDTH) -> None:
        super().__init__()
        self.width = width
        self.conv = nn.Conv1d(channels, channels, width, groups=channels, padding=width - 1)

    def forward(self, x: Tensor) -> Tensor:
        # (batch, L, C) in and out
        length = x.shape[1]
        return self.conv(x.transpose(1, 2))[:, :, :length].transpose(1, 2)


class VimmBlock(nn.Module):
    """
    Vision Mamba module: normalize, expand channels by ``expand``, causal
    convolution, selective scan, gate, project back, and add the input.
    """

    def __init__(
        self,
        channels: int,
        state_size: int,
        expand: int = 2,
        conv_width: int = CONV1D_WIDTH,
        selective: bool = True,
    ) -> None:
        super().__init__()
        if expand < 1:
            raise ParameterError(f"Channel expansion must be at least 1, got {expand}")
        inner = expand * channels
        self.channels = channels
        self.norm = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, inner)
        self.conv = CausalConv1d(inner, conv_width)
        self.ssm = SelectiveSsm(inner, state_size, selective=selective)
        self.gate_proj = nn.Linear(channels, inner)
        self.out_proj = nn.Linear(inner, channels)

    def forward(self, x: Tensor) -> Tensor:
        # (batch, L, C) in and out
        normed = self.norm(x)
        scanned = self.ssm(F.silu(self.conv(self.in_proj(normed))))
        return self.out_proj(scanned * F.silu(self.gate_proj(normed))) + x


def to_tokens(x: Tensor) -> Tensor:
    """(batch, C, H, W) feature map to (batch, H·W, C) in raster order"""
    return x.flatten(2).transpose(1, 2)


def from_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, height, width)


def vimm_forward(X: Tensor, block: VimmBlock) -> Tensor:
    """
    Apply ``block`` to an H×W×C feature map (or a batch of them, B×H×W×C),
    scanning the pixels in row-major order.
    """
    unbatched = X.ndim == 3
    x = X.unsqueeze(0) if unbatched else X
    if x.ndim != 4 or x.shape[-1] != block.channels:
        raise ParameterError(
            f"Feature map of shape {tuple(X.shape)} does not fit a block with"
            f" {block.channels} channels"
        )
    b, h, w, c = x.shape
    out = block(x.reshape(b, h * w, c)).reshape(b, h, w, c)
    return out.squeeze(0) if unbatched else out
