"""Self-verification suites run by ``iaunet verify`` (all in float64).

* gradient checks of every differentiable primitive and loss, plus a sampled
  end-to-end check of ``total_loss`` through the default model;
* loss oracles against straightforward per-element loops;
* shape and normalization invariants of the model.

Each check yields a :class:`CheckResult` naming the op it covers, so an
injected fault reports exactly which op broke.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import losses
from .evaluation import dice_score, iou_score
from .model import IAUNet, ModelConfig
from .nn import functional as F
from .nn.gradcheck import check_gradients, check_sampled
from .nn.tensor import Tensor, no_grad

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    value: float
    tol: float

    def line(self):
        flag = "PASS" if self.ok else "FAIL"
        return f"[{flag}] {self.suite}: {self.name} (value {self.value:.3g}, tol {self.tol:g})"


def _t(rng, *shape, grad=True, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad, dtype=np.float64)


def _bn_buffers(c):
    return np.zeros(c), np.ones(c)


def primitive_cases(rng):
    """``(op name, fn, inputs)`` triples covering every differentiable primitive."""
    mask = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    onehot = losses.one_hot(labels, 3)
    return [
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, padding=1),
         [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)]),
        ("conv2d_stride2", lambda x, w: F.conv2d(x, w, stride=2, padding=1),
         [_t(rng, 1, 2, 6, 6), _t(rng, 3, 2, 3, 3)]),
        ("conv2d_1x1", lambda x, w, b: F.conv2d(x, w, b),
         [_t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1), _t(rng, 2)]),
        ("conv_transpose2d_2x", F.conv_transpose2d_2x,
         [_t(rng, 2, 3, 3, 3), _t(rng, 3, 2, 2, 2), _t(rng, 2)]),
        ("batch_norm2d_train",
         lambda x, g, b: F.batch_norm2d(x, g, b, *_bn_buffers(3), training=True),
         [_t(rng, 2, 3, 3, 3), _t(rng, 3), _t(rng, 3)]),
        ("batch_norm2d_eval",
         lambda x, g, b: F.batch_norm2d(x, g, b, np.full(3, 0.2), np.full(3, 1.5), training=False),
         [_t(rng, 2, 3, 3, 3), _t(rng, 3), _t(rng, 3)]),
        ("relu", F.relu, [_t(rng, 2, 3, 4, 4)]),
        ("max_pool2d", F.max_pool2d, [_t(rng, 2, 2, 4, 4)]),
        ("upsample_bilinear2x", F.upsample_bilinear2x, [_t(rng, 2, 2, 3, 4)]),
        ("global_avg_pool", F.global_avg_pool, [_t(rng, 2, 3, 4, 4)]),
        ("masked_avg_pool", lambda x: F.masked_avg_pool(x, mask), [_t(rng, 2, 3, 4, 4)]),
        ("linear", F.linear, [_t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)]),
        ("l2_normalize", F.l2_normalize, [_t(rng, 3, 6)]),
        ("concat", lambda a, b: F.concat([a, b], axis=1), [_t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)]),
        ("sigmoid", F.sigmoid, [_t(rng, 2, 1, 4, 4)]),
        ("softmax", F.softmax, [_t(rng, 2, 3, 4, 4)]),
        ("narrow", lambda x: F.narrow(x, 1, 3), [_t(rng, 4, 5)]),
        ("tensor_arithmetic", lambda a, b: ((a * b) - a + b * 2.0).sum() / 3.0,
         [_t(rng, 3, 4), _t(rng, 3, 4)]),
        ("triplet_loss", lambda a, p, n: losses.triplet_loss(a, p, n, margin=1.0),
         [_t(rng, 4, 6, scale=0.3), _t(rng, 4, 6, scale=0.3), _t(rng, 4, 6, scale=0.3)]),
        ("bce_with_logits", lambda z: losses.bce_with_logits(z, target), [_t(rng, 2, 1, 4, 4)]),
        ("dice_loss", lambda z: losses.dice_loss(F.sigmoid(z), target, 1.0), [_t(rng, 2, 1, 4, 4)]),
        ("dice_loss_multiclass",
         lambda z: losses.dice_loss(F.softmax(z), onehot, 1.0, multiclass=True),
         [_t(rng, 2, 3, 4, 4)]),
        ("cross_entropy", lambda z: losses.cross_entropy(z, labels), [_t(rng, 2, 3, 4, 4)]),
    ]


def gradient_suite(end_to_end=True, seed=0):
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in primitive_cases(rng):
        err = check_gradients(fn, inputs, h=1e-6, seed=seed)
        results.append(CheckResult("gradcheck", name, err < PRIMITIVE_TOL, err, PRIMITIVE_TOL))
    if end_to_end:
        err = end_to_end_error(seed=seed)
        results.append(CheckResult("gradcheck", "total_loss (full model)", err < END_TO_END_TOL,
                                   err, END_TO_END_TOL))
    return results


def end_to_end_error(config=None, size=32, seed=0, coords_per_param=2):
    """Sampled finite-difference check of ``total_loss`` over every model parameter."""
    rng = np.random.default_rng(seed)
    model = IAUNet(config or ModelConfig(), seed=seed, dtype=np.float64)
    model.train()
    anchor = rng.random((1, 3, size, size))
    mask = np.zeros((1, 1, size, size))
    mask[:, :, size // 4:3 * size // 4, size // 4:3 * size // 4] = 1.0
    refs = rng.random((2, 3, size, size))
    cfg = losses.LossConfig(margin=2.0)

    def loss_fn():
        logits, e_a = model.forward_anchor(anchor, mask)
        e_ref = model.forward_embed_reference(refs)
        total, _, _ = losses.total_loss(logits, mask, e_a, F.narrow(e_ref, 0, 1),
                                        F.narrow(e_ref, 1, 2), cfg)
        return total

    # small step: larger ones cross ReLU/max-pool kinks at high-influence coordinates
    worst, _ = check_sampled(loss_fn, model.parameters(), coords_per_param, h=1e-7, seed=seed)
    return worst


# loss oracles


def oracle_triplet(a, p, n, margin):
    total = 0.0
    for i in range(a.shape[0]):
        dap = math.sqrt(sum((a[i, j] - p[i, j]) ** 2 for j in range(a.shape[1])))
        dan = math.sqrt(sum((a[i, j] - n[i, j]) ** 2 for j in range(a.shape[1])))
        total += max(dap - dan + margin, 0.0)
    return total / a.shape[0]


def _softplus(x):
    return x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))


def oracle_bce(z, t):
    """-log sigmoid(z) for positives, -log(1 - sigmoid(z)) for negatives."""
    vals = [_softplus(-zi) if ti else _softplus(zi) for zi, ti in zip(z.ravel(), t.ravel())]
    return sum(vals) / len(vals)


def oracle_dice(p, t, eps):
    inter = sum(float(a) * float(b) for a, b in zip(p.ravel(), t.ravel()))
    return 1.0 - (2.0 * inter + eps) / (float(p.sum()) + float(t.sum()) + eps)


def oracle_dice_multiclass(p, t, eps):
    return sum(oracle_dice(p[:, k], t[:, k], eps) for k in range(p.shape[1])) / p.shape[1]


def oracle_cross_entropy(z, labels):
    n, k = z.shape[:2]
    total, count = 0.0, 0
    for i in range(n):
        for pos in np.ndindex(*z.shape[2:]):
            col = [z[(i, c) + pos] for c in range(k)]
            top = max(col)
            lse = top + math.log(sum(math.exp(v - top) for v in col))
            total += lse - col[labels[(i,) + pos]]
            count += 1
    return total / count


def oracle_overlap(pred, gt):
    tp = fp = fn = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        tp += bool(a) and bool(b)
        fp += bool(a) and not b
        fn += bool(b) and not a
    dice = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    iou = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return dice, iou


def loss_oracle_errors(rng):
    """Max abs deviation of each loss/metric from its oracle on one random instance."""
    n, d = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    a, p, q = (rng.standard_normal((n, d)) for _ in range(3))
    margin = float(rng.uniform(0, 2))
    shape = (int(rng.integers(1, 3)), 1, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    z = rng.standard_normal(shape) * 3
    t = (rng.random(shape) > 0.5).astype(np.float64)
    probs = rng.random(shape)
    k = int(rng.integers(2, 4))
    zc = rng.standard_normal((shape[0], k) + shape[2:])
    labels = rng.integers(0, k, size=(shape[0],) + shape[2:])
    pc = rng.random(zc.shape)
    pred, gt = rng.random(shape[2:]) > 0.5, rng.random(shape[2:]) > 0.5
    eps = float(rng.uniform(0.1, 2))
    with no_grad():
        got = {
            "triplet_loss": (losses.triplet_loss(Tensor(a), Tensor(p), Tensor(q), margin).item(),
                             oracle_triplet(a, p, q, margin)),
            "bce_with_logits": (losses.bce_with_logits(Tensor(z), t).item(), oracle_bce(z, t)),
            "dice_loss": (losses.dice_loss(Tensor(probs), t, eps).item(), oracle_dice(probs, t, eps)),
            "dice_loss_multiclass": (
                losses.dice_loss(Tensor(pc), losses.one_hot(labels, k), eps, multiclass=True).item(),
                oracle_dice_multiclass(pc, losses.one_hot(labels, k), eps)),
            "cross_entropy": (losses.cross_entropy(Tensor(zc), labels).item(),
                              oracle_cross_entropy(zc, labels)),
        }
    od, oi = oracle_overlap(pred, gt)
    got["dice_score"] = (dice_score(pred, gt), od)
    got["iou_score"] = (iou_score(pred, gt), oi)
    return {name: abs(x - y) for name, (x, y) in got.items()}


def analytic_anchor_errors():
    with no_grad():
        e = Tensor(np.array([[0.6, 0.8]]))
        collapsed = losses.triplet_loss(e, e, e, margin=1.0).item()
        bce = losses.bce_with_logits(Tensor(np.zeros((1, 1, 1, 1))), np.ones((1, 1, 1, 1))).item()
        dice = losses.dice_loss(Tensor(np.array([1.0, 1, 0, 0])), np.array([1.0, 0, 1, 0]), 1.0).item()
    return {"triplet_loss collapsed = margin": abs(collapsed - 1.0),
            "bce_with_logits(0, 1) = ln 2": abs(bce - math.log(2.0)),
            "dice_loss anchor = 0.4": abs(dice - 0.4)}


def oracle_suite(instances=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        for name, err in loss_oracle_errors(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
    worst.update(analytic_anchor_errors())
    return [CheckResult("oracle", name, err <= ORACLE_TOL, err, ORACLE_TOL)
            for name, err in worst.items()]


# shapes


def shape_suite(config=None, seed=0):
    rng = np.random.default_rng(seed)
    model = IAUNet(config or ModelConfig(), seed=seed, dtype=np.float64)
    model.eval()
    results = []
    with no_grad():
        for size in (16, 32, 64):
            x = rng.random((1, 3, size, size))
            out = model.forward_segment(x)
            ok = out.shape == (1, model.config.num_classes, size, size)
            results.append(CheckResult("shape", f"forward_segment {size}x{size}", ok, 0.0, 0.0))
        x = rng.random((2, 3, 32, 32))
        mask = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float64)
        emb = np.concatenate([model.forward_embed_reference(x).data,
                              model.forward_embed_anchor(x, mask).data])
        dev = float(np.abs(np.linalg.norm(emb, axis=1) - 1.0).max())
        results.append(CheckResult("shape", "embeddings unit norm", dev <= 1e-5, dev, 1e-5))
        feats = Tensor(rng.standard_normal((2, 8, 2, 2)))
        same = np.array_equal(F.global_avg_pool(feats).data,
                              F.masked_avg_pool(feats, np.ones((2, 1, 2, 2))).data)
        results.append(CheckResult("shape", "masked_pool all-ones == global_avg_pool",
                                   same, 0.0 if same else 1.0, 0.0))
    return results


def run_all(end_to_end=True, report=None):
    results = []
    for suite in (lambda: gradient_suite(end_to_end), oracle_suite, shape_suite):
        for r in suite():
            results.append(r)
            if report is not None:
                report(r.line())
    return results
