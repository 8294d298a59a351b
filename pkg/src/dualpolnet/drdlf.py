"""Dilated residual dense feature learning and the classifier head.

The fused feature Z_S is concentrated by a 3x3 conv (F_0), refined by a
chain of n dilated residual dense blocks, reduced back to the base width
by a 1x1 conv over the concatenated block outputs (Q_0), and tied back
to the main encoder branch by a global residual add Q_1 = Q_0 + Z_main.
Two more 3x3 convs and two fully-connected layers produce class logits.

Each block applies three dilation-2 3x3 convs with dense connections
(conv k sees the block input and every earlier output), concatenates the
three results, reduces 3C -> C with a 1x1 conv, and adds the block input
back, so a zero-weight block is the identity.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import ShapeError
from .optim import ParamStore
from .pccaf import conv_layer, gated_branches
from .tensor import Tensor, concat_channels, flatten, linear, relu, softmax


# ---------------------------------------------------------------------------
# parameter registration
# ---------------------------------------------------------------------------


def build_drdlf(store: ParamStore, cfg: ModelConfig) -> None:
    c = cfg.feature_width()
    store.conv("drdlf.f0", cfg.fused_width(), c, 3)
    for k in range(1, cfg.n_drdb + 1):
        if cfg.enable_drdb:
            store.conv(f"drdlf.drdb{k}.d1", c, c, 3)
            store.conv(f"drdlf.drdb{k}.d2", 2 * c, c, 3)
            store.conv(f"drdlf.drdb{k}.d3", 3 * c, c, 3)
            store.conv(f"drdlf.drdb{k}.fuse", 3 * c, c, 1)
        else:
            for j in (1, 2, 3):
                store.conv(f"drdlf.plain{k}.c{j}", c, c, 3)
    store.conv("drdlf.q0", cfg.n_drdb * c, c, 1)
    store.conv("drdlf.q2.a", c, c, 3)
    store.conv("drdlf.q2.b", c, c, 3)
    store.linear("head.fc1", cfg.feature_size() ** 2 * c, cfg.fc1_width)
    store.linear("head.fc2", cfg.fc1_width, cfg.classes)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def drdb_forward(f_in: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """One dilated residual dense block; preserves shape."""
    width = store[f"{prefix}.d1.weight"].shape[1]
    if f_in.shape[1] != width:
        raise ShapeError(f"drdb_forward: input width {f_in.shape[1]} does not match block width {width}")
    d1 = relu(conv_layer(f_in, store, f"{prefix}.d1", padding=2, dilation=2))
    d2 = relu(conv_layer(concat_channels([f_in, d1]), store, f"{prefix}.d2", padding=2, dilation=2))
    d3 = relu(conv_layer(concat_channels([f_in, d1, d2]), store, f"{prefix}.d3", padding=2, dilation=2))
    ds = concat_channels([d1, d2, d3])
    return f_in + conv_layer(ds, store, f"{prefix}.fuse")


def plain_block_forward(f_in: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Width-matched substitute: three plain 3x3 convs, no dense links, no skip."""
    h = f_in
    for j in (1, 2, 3):
        h = relu(conv_layer(h, store, f"{prefix}.c{j}", padding=1))
    return h


def drdlf_forward(z_s: Tensor, z_main: Tensor, store: ParamStore, cfg: ModelConfig,
                  trace: list | None = None, capture: dict | None = None) -> Tensor:
    """Fused features to class logits.

    ``capture``, when given, receives the intermediate tensors ``q0`` (the
    reduced block stack) and ``q1`` (after the global residual).
    """
    if cfg.n_drdb < 1:
        raise ShapeError(f"drdlf_forward: need at least one block, got {cfg.n_drdb}")
    f = relu(conv_layer(z_s, store, "drdlf.f0", padding=1))
    feats = []
    for k in range(1, cfg.n_drdb + 1):
        if cfg.enable_drdb:
            f = drdb_forward(f, store, f"drdlf.drdb{k}")
        else:
            f = plain_block_forward(f, store, f"drdlf.plain{k}")
        feats.append(f)
    q0 = conv_layer(concat_channels(feats), store, "drdlf.q0")
    if cfg.enable_global_residual:
        if q0.shape != z_main.shape:
            raise ShapeError(f"global residual: shapes {q0.shape} and {z_main.shape} differ")
        q1 = q0 + z_main
    else:
        q1 = q0
    if trace is not None:
        trace.append(("drdlf.q1", q1.shape))
    if capture is not None:
        capture["q0"] = q0
        capture["q1"] = q1
    q2 = relu(conv_layer(relu(conv_layer(q1, store, "drdlf.q2.a", padding=1)), store, "drdlf.q2.b", padding=1))
    h = flatten(q2)
    if trace is not None:
        trace.append(("drdlf.flat", h.shape))
    h = relu(linear(h, store["head.fc1.weight"], store["head.fc1.bias"]))
    return linear(h, store["head.fc2.weight"], store["head.fc2.bias"])


def predict(logits: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and argmax labels (ties go to the lowest index)."""
    probs = softmax(logits, axis=1).data
    return probs, probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# closed-form parameter count (independent of the allocated store)
# ---------------------------------------------------------------------------


def _conv_count(cin: int, cout: int, k: int) -> int:
    return cin * k * k * cout + cout


def count_params(cfg: ModelConfig) -> int:
    """Trainable-parameter total computed purely from the configuration.

    Kept arithmetic (never reads a ParamStore) so tests can cross-check
    it against the allocated model.
    """
    cfg.validate()
    c = cfg.feature_width()
    enc = 0
    cin = 1
    for w in cfg.stage_widths():
        enc += _conv_count(cin, w, 3) + 2 * w  # conv plus BN affine
        cin = w
    total = enc * len(cfg.enabled_branches())

    sa = 3 * _conv_count(c, c // 2, 1) + _conv_count(c // 2, c, 1)
    per_gate = _conv_count(2 * c, c, 3) + 2 * (_conv_count(c, c, 3)
                                               + (sa if cfg.enable_sa_module else 0))
    total += per_gate * len(gated_branches(cfg))

    total += _conv_count(cfg.fused_width(), c, 3)  # f0
    if cfg.enable_drdb:
        block = (_conv_count(c, c, 3) + _conv_count(2 * c, c, 3)
                 + _conv_count(3 * c, c, 3) + _conv_count(3 * c, c, 1))
    else:
        block = 3 * _conv_count(c, c, 3)
    total += block * cfg.n_drdb
    total += _conv_count(cfg.n_drdb * c, c, 1)     # q0
    total += 2 * _conv_count(c, c, 3)              # q2
    flat = cfg.feature_size() ** 2 * c
    total += flat * cfg.fc1_width + cfg.fc1_width  # fc1
    total += cfg.fc1_width * cfg.classes + cfg.classes
    return total
