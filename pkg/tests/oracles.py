"""Independent brute-force references shared by the geometry and acceptance tests."""


def fps_oracle(pts, g, start=0):
    """Greedy max-min with plain Python loops; lowest index wins ties."""
    chosen = [start]
    while len(chosen) < g:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(sum((pts[i][a] - pts[j][a]) ** 2 for a in range(3)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(pts, center_idx, k):
    out = []
    for c in center_idx:
        d = [(sum((pts[i][a] - pts[c][a]) ** 2 for a in range(3)), i) for i in range(len(pts))]
        d.sort()
        out.append([i for _, i in d[:k]])
    return out


def chamfer_oracle(a, b):
    def one_way(x, y):
        total = 0.0
        for p in x:
            total += min(sum((p[i] - q[i]) ** 2 for i in range(3)) for q in y)
        return total / len(x)
    return one_way(a, b) + one_way(b, a)


