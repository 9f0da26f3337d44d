"""Context-conditioned causal CNN with MADE-style feature masks.

Architecture: a shallow context network maps the (encoded) model
parameters to a context vector; the sequence path is a causal
convolution layer, ``r`` residual blocks (two causal convolutions each,
GeLU activations), and a final causal convolution whose current-step tap
is masked so output i never sees input i — except through explicitly
whitelisted rows (the outbreak end-of-series channel).  A linear
transform of the context vector is added to every layer's output,
broadcast across time.

With kernel length k and r residual blocks the receptive field is
m = 2(r+1)(k-1) steps.

For d-dimensional inputs the hidden width is d*p and the current-step
taps are masked block-lower-triangularly: inclusive blocks in hidden
layers, strictly lower in the final layer, so the parameter block for
feature j at step i depends only on features < j of step i.  Masks are
applied multiplicatively at every forward pass; the optimizer can never
resurrect a masked entry because its gradient is identically zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Shape of the surrogate network."""

    kernel_length: int = 5
    residual_blocks: int = 2
    hidden_per_feature: int = 32
    feature_count: int = 1
    mixture_components: int = 5
    context_hidden: int = 64
    context_dim: int = 12
    context_inputs: int = 2
    extra_channels: int = 0  # e.g. 1 for the outbreak f-channel

    def __post_init__(self):
        if self.kernel_length < 2:
            raise ValueError("kernel_length must be >= 2")
        if min(self.residual_blocks, self.extra_channels) < 0:
            raise ValueError("counts must be nonnegative")
        if min(self.hidden_per_feature, self.feature_count, self.mixture_components) < 1:
            raise ValueError("widths must be >= 1")

    @property
    def hidden_width(self):
        return self.feature_count * self.hidden_per_feature

    @property
    def output_width(self):
        return self.feature_count * 3 * self.mixture_components + self.extra_channels

    @property
    def receptive_field(self):
        return 2 * (self.residual_blocks + 1) * (self.kernel_length - 1)


def build_masks(spec: ArchSpec):
    """Current-step tap masks, oriented (c_in, c_out).

    ``first``  (d, d*p):     inclusive block lower triangular
    ``hidden`` (d*p, d*p):   inclusive block lower triangular
    ``final``  (d*p, out):   strictly block lower triangular, with the
                             extra output channels unmasked (all ones).
    For d = 1 these reduce to all-ones / all-ones / (zeros | ones).
    """
    d, p, c = spec.feature_count, spec.hidden_per_feature, spec.mixture_components
    blk_in = np.repeat(np.arange(d), 1)
    blk_hidden = np.repeat(np.arange(d), p)
    blk_out = np.repeat(np.arange(d), 3 * c)
    first = (blk_in[:, None] <= blk_hidden[None, :]).astype(np.float64)
    hidden = (blk_hidden[:, None] <= blk_hidden[None, :]).astype(np.float64)
    final_main = (blk_hidden[:, None] < blk_out[None, :]).astype(np.float64)
    extra = np.ones((d * p, spec.extra_channels))
    final = np.concatenate([final_main, extra], axis=1)
    return {"first": first, "hidden": hidden, "final": final}


def full_kernel_mask(k, current_mask):
    """Expand a current-step mask to a (k, c_in, c_out) kernel mask."""
    c_in, c_out = current_mask.shape
    m = np.ones((k, c_in, c_out))
    m[k - 1] = current_mask
    return m


def init_weights(spec: ArchSpec, rng) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialisation.

    The final-layer bias of every scale channel is set so that the
    initial softplus output is ~1, which keeps early training stable.
    """

    def unif(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    k = spec.kernel_length
    d, p, c = spec.feature_count, spec.hidden_per_feature, spec.mixture_components
    w = {}
    w["ctx_w1"] = unif((spec.context_inputs, spec.context_hidden), spec.context_inputs)
    w["ctx_b1"] = np.zeros(spec.context_hidden)
    w["ctx_w2"] = unif((spec.context_hidden, spec.context_dim), spec.context_hidden)
    hidden = spec.hidden_width

    def layer(name, c_in, c_out):
        w[f"{name}_w"] = unif((k, c_in, c_out), k * c_in)
        w[f"{name}_b"] = np.zeros(c_out)
        w[f"{name}_wt"] = unif((spec.context_dim, c_out), spec.context_dim)

    layer("first", d, hidden)
    for i in range(spec.residual_blocks):
        layer(f"res{i}a", hidden, hidden)
        layer(f"res{i}b", hidden, hidden)
    layer("final", hidden, spec.output_width)
    bias = w["final_b"]
    softplus_one = np.log(np.e - 1.0)
    for j in range(d):
        bias[j * 3 * c + c : j * 3 * c + 2 * c] = softplus_one
    return w


def context_vector(theta_enc, weights):
    """c(theta) = W2 gelu(W1 theta + b); theta_enc is (batch, inputs)."""
    h = dc.gelu(dc.add(dc.matmul(theta_enc, weights["ctx_w1"]), weights["ctx_b1"]))
    return dc.matmul(h, weights["ctx_w2"])


def causal_layer(z, ctx, weights, name, kernel_mask):
    """One context-conditioned causal convolution layer."""
    w = dc.mul(weights[f"{name}_w"], kernel_mask)
    out = dc.conv1d_causal(z, w)
    inj = dc.matmul(ctx, weights[f"{name}_wt"])
    inj = dc.reshape(inj, (dc._val(inj).shape[0], 1, dc._val(inj).shape[1]))
    return dc.add(dc.add(out, inj), weights[f"{name}_b"])


def residual_block(z, ctx, weights, index, kernel_mask):
    """z + l2(gelu(l1(gelu(z), ctx)), ctx)."""
    h = causal_layer(dc.gelu(z), ctx, weights, f"res{index}a", kernel_mask)
    h = causal_layer(dc.gelu(h), ctx, weights, f"res{index}b", kernel_mask)
    return dc.add(z, h)


def forward(x_seq, theta_enc, weights, spec: ArchSpec, masks=None):
    """Full network: (batch, n, d) + (batch, ctx_in) -> (batch, n, out).

    ``x_seq`` is the rescaled input sequence; step-0 shifts need the
    known initial value, which is the caller's responsibility.
    """
    if dc._val(x_seq).shape[1] == 0:
        raise ValueError("forward: sequence length must be >= 1")
    masks = masks or build_masks(spec)
    k = spec.kernel_length
    ctx = context_vector(theta_enc, weights)
    z = causal_layer(x_seq, ctx, weights, "first", full_kernel_mask(k, masks["first"]))
    hidden_mask = full_kernel_mask(k, masks["hidden"])
    for i in range(spec.residual_blocks):
        z = residual_block(z, ctx, weights, i, hidden_mask)
    final_mask = full_kernel_mask(k, masks["final"])
    return causal_layer(z, ctx, weights, "final", final_mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def mask_digests(spec: ArchSpec):
    masks = build_masks(spec)
    return {
        name: hashlib.sha256(np.ascontiguousarray(m).tobytes()).hexdigest()
        for name, m in sorted(masks.items())
    }


def save_checkpoint(path, spec: ArchSpec, weights: dict):
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(spec),
        "mask_digests": mask_digests(spec),
        "names": sorted(weights),
    }
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in weights.items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        spec = ArchSpec(**meta["arch"])
        if mask_digests(spec) != meta["mask_digests"]:
            raise ValueError("checkpoint mask digests do not match this code")
        weights = {k: data[k] for k in meta["names"]}
    return spec, weights
