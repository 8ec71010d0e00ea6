"""Finite-difference checks for every differentiable primitive and two composed nets.

Each check contracts the primitive's output with a fixed random cotangent R,
so loss = sum(R * f(x)) and the analytic gradient is the primitive's
vector-Jacobian product applied to R.  Everything runs in float64.
"""
import numpy as np

from dtjscc import codec
from dtjscc.diffcore import (FdProblem, GradientTape, MlpParams, backward,
                             finite_difference_check, forward_mlp, numerical_gradient,
                             relative_error, softmax_cross_entropy)

STEP = 1e-5


def _worst(analytic, f, x):
    return float(np.max(relative_error(analytic, numerical_gradient(f, x, STEP))))


def check_logits(rng):
    cb = codec.Codebook(rng.standard_normal((3, 4)))
    feat = rng.standard_normal((2, 6))
    R = rng.standard_normal((2, 2, 4))

    def loss():
        return float(np.sum(R * codec.compute_logits(cb, codec.split_features(feat, 2, 3))))

    dM, dfeat = codec.logits_backward(cb, codec.split_features(feat, 2, 3), R)
    return max(_worst(dM, loss, cb.M), _worst(dfeat, loss, feat))


def check_entropy(rng):
    logits = rng.standard_normal((3, 2, 5)) * 2
    R = rng.standard_normal((3, 2))

    def loss():
        return float(np.sum(R * codec.encoder_distribution(logits).entropies))

    return _worst(codec.entropy_backward(codec.encoder_distribution(logits), R), loss, logits)


def check_gumbel_softmax(rng):
    logits = rng.standard_normal((3, 2, 4))
    noise = codec.gumbel_from_uniform(codec.uniform_open(rng, logits.shape))
    R = rng.standard_normal(logits.shape)

    def loss():
        return float(np.sum(R * codec.gumbel_softmax(logits, noise, 0.7).w))

    sample = codec.gumbel_softmax(logits, noise, 0.7)
    return _worst(codec.gumbel_softmax_backward(sample, R), loss, logits)


def check_receiver_embed(rng):
    cb = codec.Codebook(rng.standard_normal((3, 4)))
    sel = codec.gumbel_softmax(rng.standard_normal((2, 5, 4)), np.zeros((2, 5, 4)), 1.0).w
    z_hat = np.argmax(sel, axis=-1)
    R = rng.standard_normal((2, 15))

    def loss():
        return float(np.sum(R * codec.receiver_embed(cb, z_hat, sel)))

    dM, dsel = codec.receiver_embed_backward(cb, sel, R)
    return max(_worst(dM, loss, cb.M), _worst(dsel, loss, sel))


def check_cross_entropy(rng):
    logits = rng.standard_normal((4, 6))
    labels = rng.integers(0, 6, 4)

    def loss():
        return float(softmax_cross_entropy(logits, labels)[0].sum())

    return _worst(softmax_cross_entropy(logits, labels)[1], loss, logits)


def _dense(activation):
    def build(rng):
        params = MlpParams.init([4, 5], [activation], rng, dtype=np.float64)
        x = rng.standard_normal((6, 4))
        if activation == "relu":
            # keep every pre-activation well away from the kink
            pre = x @ params.layers[0].weight.T + params.layers[0].bias
            params.layers[0].bias += np.where(np.abs(pre).min(axis=0) < 0.05, 0.5, 0.0)
        return FdProblem(params, x, rng.standard_normal((6, 5)))
    return build


def check_dense(activation, seed):
    rep = finite_difference_check(_dense(activation), seed)
    assert activation != "relu" or rep.min_relu_margin > 1e-3
    return rep.max_rel_error


def check_mlp_classifier(seed):
    """Composed net 1: two tanh/relu layers and a softmax cross-entropy head."""
    def build(rng):
        params = MlpParams.init([6, 8, 7, 4], ["tanh", "tanh", "identity"], rng, dtype=np.float64)
        return FdProblem(params, rng.standard_normal((5, 6)), rng.integers(0, 4, 5))
    return finite_difference_check(build, seed).max_rel_error


def check_pipeline(seed, beta=0.05, tau=0.8):
    """Composed net 2: encoder, codebook logits, relaxed Gumbel sample, embedding,
    inference net and the cross-entropy minus beta * encoder entropy objective.

    The relaxed selection w is fed to the receiver directly (no channel), which
    is the differentiable path the straight-through estimator uses in training.
    """
    rng = np.random.default_rng(seed)
    d, D, K, n = 2, 3, 4, 5
    enc = MlpParams.init([5, d * D], ["tanh"], rng, dtype=np.float64)
    inf = MlpParams.init([d * D, 6, 3], ["tanh", "identity"], rng, dtype=np.float64)
    cb = codec.Codebook(rng.standard_normal((D, K)))
    x = rng.standard_normal((n, 5))
    y = rng.integers(0, 3, n)
    noise = codec.gumbel_from_uniform(codec.uniform_open(rng, (n, d, K)))

    def forward(tapes=None):
        et, it = tapes if tapes else (None, None)
        split = codec.split_features(forward_mlp(enc, x, et), d, D)
        logits = codec.compute_logits(cb, split)
        dist = codec.encoder_distribution(logits)
        sample = codec.gumbel_softmax(logits, noise, tau)
        emb = codec.receiver_embed(cb, np.argmax(sample.w, -1), sample.w)
        out = forward_mlp(inf, emb, it)
        ce, dout = softmax_cross_entropy(out, y)
        loss = ce.mean() - beta * dist.total_entropy().mean()
        return float(loss), (split, dist, sample, dout)

    tapes = (GradientTape(), GradientTape())
    _, (split, dist, sample, dout) = forward(tapes)
    ig = backward(tapes[1], dout / n)
    dM_rx, dsel = codec.receiver_embed_backward(cb, sample.w, ig.input)
    dlogits = codec.gumbel_softmax_backward(sample, dsel)
    dlogits = dlogits + codec.entropy_backward(dist, np.full((n, d), -beta / n))
    dM_tx, dfeat = codec.logits_backward(cb, split, dlogits)
    eg = backward(tapes[0], dfeat)

    def loss():
        return forward()[0]

    errs = [_worst(dM_rx + dM_tx, loss, cb.M)]
    for params, grads in ((enc, eg), (inf, ig)):
        for a, g in zip(params.arrays(), grads.arrays()):
            errs.append(_worst(g, loss, a))
    return max(errs)


def all_checks(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "dense_identity": check_dense("identity", seed),
        "dense_tanh": check_dense("tanh", seed),
        "dense_relu": check_dense("relu", seed),
        "softmax_cross_entropy": check_cross_entropy(rng),
        "codebook_logits": check_logits(rng),
        "encoder_entropy": check_entropy(rng),
        "gumbel_softmax": check_gumbel_softmax(rng),
        "receiver_embed": check_receiver_embed(rng),
        "composed_mlp_classifier": check_mlp_classifier(seed),
        "composed_pipeline": check_pipeline(seed),
    }
