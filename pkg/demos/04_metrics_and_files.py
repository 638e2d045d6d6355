"""Error metrics, region reports and flow file formats."""

import os
import tempfile

import numpy as np

from flowlite.evaluation import aee, fl_rate, region_report, report_csv
from flowlite.flowio import read_flo, read_kitti_png, write_flo, write_kitti_png

rule = "-" * 60

print("A pixel is an outlier only when its end-point error is at least 3 px AND at least 5% of the true length.")
for epe, mag in [(2.99, 1.0), (3.0, 1.0), (4.0, 100.0), (4.0, 10.0)]:
    gt = np.zeros((1, 2, 1, 1), dtype=np.float32)
    gt[0, 0] = mag
    u = gt.copy()
    u[0, 1] = epe
    print("  EPE %.2f, |gt| %5.1f -> outlier: %s" % (epe, mag, fl_rate(u, gt) == 1.0))
print(rule)

rng = np.random.default_rng(0)
gt = rng.uniform(-4, 4, (1, 2, 6, 8)).astype(np.float32)
u = gt + rng.normal(0, 1.0, gt.shape).astype(np.float32)
left = np.zeros((1, 1, 6, 8), dtype=bool)
left[..., :4] = True
print("AEE %.3f, Fl %.3f" % (aee(u, gt), fl_rate(u, gt)))
print("per-region report:")
print(report_csv(region_report(u, gt, {"left": left, "right": ~left})))
print(rule)

tmp = tempfile.mkdtemp()
flo = os.path.join(tmp, "f.flo")
write_flo(flo, gt)
print(".flo file: %d bytes for a %dx%d field, round trip exact: %s" % (
    os.path.getsize(flo), gt.shape[3], gt.shape[2], np.array_equal(read_flo(flo).data, gt)))
png = os.path.join(tmp, "f.png")
write_kitti_png(png, gt)
back, valid = read_kitti_png(png)
print("KITTI 16-bit PNG: worst component error %.5f px (quantum 1/64)" % np.abs(back.data - gt).max())
