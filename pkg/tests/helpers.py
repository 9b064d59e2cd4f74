"""Independent reference implementations used as test oracles."""
import itertools
import math

import numpy as np

from glyphmatch.tensor import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at float64 array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_op_grad(op, *arrays, seed=0, rtol=1e-5, atol=1e-7):
    """Compare autodiff gradients of ``sum(op(...) * w)`` with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = op(*[Tensor(a) for a in arrays])
    w = rng.normal(size=out.shape)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (op(*tensors) * Tensor(w)).sum().backward()
    for k, t in enumerate(tensors):
        def f(x, k=k):
            args = [Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
            return float((op(*args).data * w).sum())

        expected = numeric_grad(f, arrays[k].copy())
        np.testing.assert_allclose(t.grad, expected, rtol=rtol, atol=atol)


def conv2d_loops(x, k, bias=None, stride=1, padding=0):
    """Direct-loop NCHW cross-correlation."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, oc, i, j] = np.sum(patch * k[oc]) + (0 if bias is None else bias[oc])
    return out


def pool_loops(x, kh, kw, reduce):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // kh, w // kw))
    for i in range(h // kh):
        for j in range(w // kw):
            out[:, :, i, j] = reduce(x[:, :, i * kh : (i + 1) * kh, j * kw : (j + 1) * kw], axis=(2, 3))
    return out


def bilinear_up2_loops(img):
    """2x bilinear upsampling of a 2-D array, half-pixel centres, edge clamp."""
    h, w = img.shape
    out = np.zeros((2 * h, 2 * w))
    for p in range(2 * h):
        for q in range(2 * w):
            sy = min(max((p + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((q + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[p, q] = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
                         + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)
    return out


def ctc_brute_force(log_probs, target, blank):
    """-log sum over all frame paths that collapse to ``target``."""
    t_len, v = log_probs.shape
    total = -math.inf
    for path in itertools.product(range(v), repeat=t_len):
        collapsed, prev = [], None
        for k in path:
            if k != prev and k != blank:
                collapsed.append(k)
            prev = k
        if collapsed == list(target):
            s = sum(log_probs[t, k] for t, k in enumerate(path))
            total = np.logaddexp(total, s)
    return -total


def collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def exhaustive_map_labeling(log_probs, blank):
    """Labeling with the largest summed path probability (no LM)."""
    t_len, v = log_probs.shape
    scores = {}
    for path in itertools.product(range(v), repeat=t_len):
        lab = collapse(path, blank)
        s = sum(log_probs[t, k] for t, k in enumerate(path))
        scores[lab] = np.logaddexp(scores.get(lab, -math.inf), s)
    return scores


def edit_distance_bfs(a, b, alphabet):
    """Shortest edit script length by breadth-first search over strings."""
    a, b = tuple(a), tuple(b)
    if a == b:
        return 0
    frontier, seen, d = {a}, {a}, 0
    limit = len(a) + len(b)
    while frontier and d <= limit:
        d += 1
        nxt = set()
        for s in frontier:
            cands = set()
            for i in range(len(s) + 1):
                for c in alphabet:
                    cands.add(s[:i] + (c,) + s[i:])
            for i in range(len(s)):
                cands.add(s[:i] + s[i + 1 :])
                for c in alphabet:
                    cands.add(s[:i] + (c,) + s[i + 1 :])
            for c in cands:
                if len(c) > max(len(a), len(b)) + 1:
                    continue
                if c == b:
                    return d
                if c not in seen:
                    seen.add(c)
                    nxt.add(c)
        frontier = nxt
    raise AssertionError("search did not terminate")


def full_model_gradcheck(n_params: int, seed: int = 0, step: float = 1e-3):
    """Central-difference check of total_loss through encoder and decoder.

    Uses a float64 model on a 32x16 toy line over a 3-glyph alphabet and
    returns the relative errors of ``n_params`` randomly chosen scalar weights.
    """
    from glyphmatch.encoder import build_glyph_line
    from glyphmatch.model import GlyphMatcher, encode_targets
    from glyphmatch.synth import FontAtlas, render_line
    from glyphmatch.trainer import sim_targets, total_loss

    rng = np.random.default_rng(seed)
    glyphs = {}
    for i, ch in enumerate("abc"):
        g = np.zeros((32, 8))
        g[6 + 3 * i : 26 - 2 * i, 1 + i : 7] = rng.uniform(0.5, 1.0, (20 - 5 * i, 6 - i))
        glyphs[ch] = g
    font = FontAtlas("toy", "regular", glyphs)
    gl = build_glyph_line(font, "abc")
    sample = render_line(font, "ab")  # 32 x 16
    model = GlyphMatcher.create(seed, dtype=np.float64)
    # zero biases map blank regions to zero feature vectors, where cosine
    # similarity is discontinuous; jitter them to check at a generic point
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data += rng.normal(0.0, 0.05, p.data.shape)
    target = encode_targets(sample.text, gl)
    targets = sim_targets(sample, gl)

    def loss():
        out = model.forward(sample.image, gl)
        return total_loss(out.log_probs, out.S, target, targets).total

    for p in model.params.values():
        p.grad = None
    loss().backward()
    names = sorted(model.params)
    errors = []
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        old = p.data[idx]
        p.data[idx] = old + step
        hi = float(loss().data)
        p.data[idx] = old - step
        lo = float(loss().data)
        p.data[idx] = old
        num = (hi - lo) / (2 * step)
        ana = float(p.grad[idx])
        errors.append((name, ana, num, abs(ana - num) / max(abs(ana), abs(num), 1e-6)))
    return errors
