"""
Lung point clouds
=================

Flatten a volume into x,y,z,value rows that a 3D viewer can load.
"""

import tempfile
from pathlib import Path

from ctlab import PhantomSpec, export_pointcloud, generate_volume, write_pointcloud_csv

case = generate_volume(PhantomSpec(side=40, depth=12, slice_spacing=2.5, seed=9), 0)

ct_rows = export_pointcloud(case.ct, case.lung)
lesion_rows = export_pointcloud(case.ct, case.lung, source="ground_truth", mask=case.lesion, nonzero_only=True)
print("lung pixels", int(case.lung.voxels.sum()), "rows", len(ct_rows))
print("lesion rows", len(lesion_rows), "z range", lesion_rows[:, 2].min(), "-", lesion_rows[:, 2].max())

path = Path(tempfile.mkdtemp()) / "lung.csv"
write_pointcloud_csv(ct_rows, path)
print(path.read_text().splitlines()[:4])
