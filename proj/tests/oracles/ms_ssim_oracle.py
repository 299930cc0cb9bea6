"""Reference MS-SSIM values for the metric tests.

Per-scale SSIM/CS come from pytorch_msssim._ssim in float64. The five
standard exponents are truncated to the scales whose side still covers the
11x11 window and rescaled to sum to one. Prints the frozen constants.
"""
import math

import torch
import torch.nn.functional as F
from pytorch_msssim.ssim import _fspecial_gauss_1d, _ssim

WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]


def pattern(h, w, c, kind):
    img = torch.zeros(1, c, h, w, dtype=torch.float64)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                if kind == "smooth":
                    v = 0.5 + 0.4 * math.sin(0.3 * x + 0.2 * y + ch)
                elif kind == "inverted":
                    v = 0.5 + 0.4 * math.sin(0.3 * x + 0.2 * y + ch)
                    if (7 * x + 13 * y + 3 * ch) % 20 == 0:
                        v = 1.0 - v
                elif kind == "ramp":
                    v = (x + y + 10 * ch) / (w + h + 20)
                img[0, ch, y, x] = v
    return img


def ms_ssim(x, y):
    side = min(x.shape[-2:])
    scales = 0
    while scales < 5 and side >= 11:
        scales += 1
        side //= 2
    weights = torch.tensor(WEIGHTS[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    win = _fspecial_gauss_1d(11, 1.5).to(torch.float64).repeat([x.shape[1], 1, 1, 1])
    mcs = []
    for i in range(scales):
        ssim_pc, cs = _ssim(x, y, data_range=1.0, win=win, size_average=False, K=(0.01, 0.03))
        if i < scales - 1:
            mcs.append(torch.relu(cs))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    stack = torch.stack(mcs + [torch.relu(ssim_pc)], dim=0)
    return torch.prod(stack ** weights.view(-1, 1, 1), dim=0).mean().item(), scales


for (h, w, c) in [(64, 64, 3), (32, 32, 1), (256, 256, 1)]:
    a = pattern(h, w, c, "smooth")
    b = pattern(h, w, c, "inverted")
    r = pattern(h, w, c, "ramp")
    print(f"{h}x{w}x{c} smooth-vs-inverted {ms_ssim(a, b)}")
    print(f"{h}x{w}x{c} smooth-vs-ramp {ms_ssim(a, r)}")
