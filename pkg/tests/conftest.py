import numpy as np
import pytest



def conv_loop(x, k, bias=None, same=False):
    """Direct nested-loop cross-correlation, (H, W, C) x (h, w, C, K)."""
    h, w, C, K = k.shape
    if same:
        t, l = (h - 1) // 2, (w - 1) // 2
        x = np.pad(x, ((t, h - 1 - t), (l, w - 1 - l), (0, 0)))
    H, W = x.shape[0] - h + 1, x.shape[1] - w + 1
    out = np.zeros((H, W, K))
    for r in range(H):
        for c in range(W):
            for q in range(K):
                s = 0.0
                for i in range(h):
                    for j in range(w):
                        for ch in range(C):
                            s += x[r + i, c + j, ch] * k[i, j, ch, q]
                out[r, c, q] = s + (0.0 if bias is None else bias[q])
    return out


def confusion_loop(pred, gt, fov):
    tp = tn = fp = fn = 0
    for p, g, f in zip(pred.ravel(), gt.ravel(), fov.ravel()):
        if not f:
            continue
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def auc_rank(scores, labels):
    """Mann-Whitney statistic: P(pos > neg) + 0.5 P(tie)."""
    pos, neg = scores[labels], scores[~labels]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def energy_ld(W, images):
    """sum over images of ||W (*) image||^2, accumulated tap by tap in extended precision."""
    W = np.asarray(W, dtype=np.longdouble)
    images = np.asarray(images, dtype=np.longdouble)
    m, n = W.shape
    Ho, Wo = images.shape[-2] - m + 1, images.shape[-1] - n + 1
    R = np.zeros(images.shape[:-2] + (Ho, Wo), dtype=np.longdouble)
    for a in range(m):
        for b in range(n):
            R += W[a, b] * images[..., a:a + Ho, b:b + Wo]
    return np.sum(R * R)


def central_diff_ld(term, W, h=1e-6):
    """Central differences of ``term`` at every coordinate of ``W``, in extended precision."""
    hl = np.longdouble(h)
    out = np.empty(W.shape)
    for i in range(W.size):
        wp = np.asarray(W, dtype=np.longdouble).copy()
        wm = wp.copy()
        wp.flat[i] += hl
        wm.flat[i] -= hl
        out.flat[i] = float((term(wp) - term(wm)) / (2 * hl))
    return out


ACCEPTANCE_LINES = []


def report(criterion, passed, detail, status=None):
    status = status or ("PASS" if passed else "FAIL")
    line = f"[{status}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
