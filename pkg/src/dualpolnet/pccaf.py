"""Polarization-guided encoder branches fused by cross-attention gating.

Three parallel four-stage encoders (one per guidance channel) reduce a
1 x S x S input to a 16x-downsampled feature map. Each secondary branch
is then gated by an attention map computed jointly from that branch and
the main (VV-amplitude) branch:

    C_0 = concat(Z_i, Z_r)
    C_1 = relu(conv3x3(C_0))
    C_{k+1} = C_k * f_sa(C_k) + conv3x3(C_k)     (two blocks)
    A_i = sigmoid(C_3)

where f_sa is an embedded-Gaussian self-attention map over spatial
positions with a channel-halving bottleneck. Gated branches and the
main branch are fused by channel concat (or elementwise add).
"""

from __future__ import annotations

from .config import BRANCHES, ModelConfig
from .errors import ShapeError
from .optim import ParamStore
from .tensor import (Tensor, batchnorm2d, concat_channels, conv2d, matmul, maxpool2d,
                     mul, relu, reshape, sigmoid, softmax, transpose)

BRANCH_INDEX = {"i1": 1, "i2": 2, "i3": 3}


# ---------------------------------------------------------------------------
# parameter registration
# ---------------------------------------------------------------------------


def build_encoder(store: ParamStore, prefix: str, widths: list[int]) -> None:
    cin = 1
    for k, cout in enumerate(widths, start=1):
        store.conv(f"{prefix}.s{k}.conv", cin, cout, 3)
        store.batchnorm(f"{prefix}.s{k}.bn", cout)
        cin = cout


def build_sa(store: ParamStore, prefix: str, c: int) -> None:
    for branch_name in ("phi", "theta", "g"):
        store.conv(f"{prefix}.{branch_name}", c, c // 2, 1)
    store.conv(f"{prefix}.out", c // 2, c, 1)


def build_xattn(store: ParamStore, prefix: str, c: int, with_sa: bool) -> None:
    store.conv(f"{prefix}.reduce", 2 * c, c, 3)
    for k in (1, 2):
        store.conv(f"{prefix}.b{k}.conv", c, c, 3)
        if with_sa:
            build_sa(store, f"{prefix}.b{k}.sa", c)


def gated_branches(cfg: ModelConfig) -> list[str]:
    if not cfg.enable_cross_attention:
        return []
    return [b for b in cfg.enabled_branches() if b != cfg.main_branch]


def build_pccaf(store: ParamStore, cfg: ModelConfig) -> None:
    widths = cfg.stage_widths()
    for b in cfg.enabled_branches():
        build_encoder(store, f"pccaf.enc{BRANCH_INDEX[b]}", widths)
    for b in gated_branches(cfg):
        build_xattn(store, f"pccaf.xattn{BRANCH_INDEX[b]}", cfg.feature_width(),
                    cfg.enable_sa_module)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def conv_layer(x: Tensor, store: ParamStore, name: str, padding: int = 0, dilation: int = 1) -> Tensor:
    return conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"],
                  stride=1, padding=padding, dilation=dilation)


def encode_branch(x: Tensor, store: ParamStore, prefix: str, mode: str,
                  n_stages: int = 4, trace: list | None = None) -> Tensor:
    """Four (conv3x3 -> BN -> ReLU -> maxpool/2) stages."""
    h = x
    for k in range(1, n_stages + 1):
        h = conv_layer(h, store, f"{prefix}.s{k}.conv", padding=1)
        gamma = store[f"{prefix}.s{k}.bn.gamma"]
        beta = store[f"{prefix}.s{k}.bn.beta"]
        h = batchnorm2d(h, gamma, beta, store.bn[f"{prefix}.s{k}.bn"], mode)
        h = relu(h)
        h = maxpool2d(h, 2, 2)
        if trace is not None:
            trace.append((f"{prefix}.s{k}", h.shape))
    return h


def sa_module(c_in: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Spatial self-attention map with a C/2 bottleneck; output shape = input shape."""
    n, c, h, w = c_in.shape
    if c % 2:
        raise ShapeError(f"sa_module: channel count {c} must be even")
    hw = h * w
    c2 = c // 2
    q = reshape(conv_layer(c_in, store, f"{prefix}.phi"), (n, c2, hw))
    k = reshape(conv_layer(c_in, store, f"{prefix}.theta"), (n, c2, hw))
    v = reshape(conv_layer(c_in, store, f"{prefix}.g"), (n, c2, hw))
    att = softmax(matmul(transpose(q, (0, 2, 1)), k), axis=-1)  # (N, HW, HW), rows sum to 1
    resp = matmul(att, transpose(v, (0, 2, 1)))                 # (N, HW, C/2)
    resp = reshape(transpose(resp, (0, 2, 1)), (n, c2, h, w))
    return conv_layer(resp, store, f"{prefix}.out")


def cross_attention(zi: Tensor, zr: Tensor, store: ParamStore, prefix: str,
                    use_sa: bool = True) -> Tensor:
    """Attention map in (0,1) gating branch feature zi against reference zr."""
    if zi.shape != zr.shape:
        raise ShapeError(f"cross_attention: feature shapes {zi.shape} and {zr.shape} differ")
    c = relu(conv_layer(concat_channels([zi, zr]), store, f"{prefix}.reduce", padding=1))
    for k in (1, 2):
        conv_path = conv_layer(c, store, f"{prefix}.b{k}.conv", padding=1)
        if use_sa:
            c = mul(c, sa_module(c, store, f"{prefix}.b{k}.sa")) + conv_path
        else:
            c = c + conv_path  # degenerate block: skip plus conv
    return sigmoid(c)


def pccaf_forward(x1: Tensor | None, x2: Tensor | None, x3: Tensor | None,
                  store: ParamStore, cfg: ModelConfig, mode: str,
                  trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Encode enabled branches, gate secondaries, fuse; returns (Z_S, Z_main)."""
    inputs = dict(zip(BRANCHES, (x1, x2, x3)))
    enabled = cfg.enabled_branches()
    shapes = set()
    for b in enabled:
        if inputs[b] is None:
            raise ShapeError(f"pccaf_forward: branch {b} is enabled but its input is missing")
        shapes.add(inputs[b].shape)
    if len(shapes) != 1:
        raise ShapeError(f"pccaf_forward: branch input shapes differ: {sorted(shapes)}")

    z = {b: encode_branch(inputs[b], store, f"pccaf.enc{BRANCH_INDEX[b]}", mode, trace=trace)
         for b in enabled}
    z_main = z[cfg.main_branch]
    gated = set(gated_branches(cfg))
    parts = []
    for b in enabled:
        if b in gated:
            a = cross_attention(z[b], z_main, store, f"pccaf.xattn{BRANCH_INDEX[b]}",
                                use_sa=cfg.enable_sa_module)
            parts.append(mul(z[b], a))
        else:
            parts.append(z[b])
    if cfg.fusion == "add":
        z_s = parts[0]
        for p in parts[1:]:
            z_s = z_s + p
    else:
        z_s = concat_channels(parts)
    if trace is not None:
        trace.append(("pccaf.z_s", z_s.shape))
    return z_s, z_main
