"""A first look at the world: one studio scene, what a depth camera sees, and how a sound source
changes the two ears' spectrograms as the listener turns.

Run with ``python3 demos/01_scenes_and_sensors.py``.
"""

import numpy as np

from crossnav.scene import generate_episodes, generate_scene
from crossnav.sensors import AudioConfig, DepthConfig, Pose, make_source, render_binaural, render_depth, stft_spectrogram

scene = generate_scene("studio", seed=0)
print(f"{scene.name}: {scene.width}x{scene.height} cells, {scene.navigable_count} navigable, "
      f"{len(scene.targets)} sounding objects")

# '#' is wall, '.' is floor, letters mark targets by category initial
art = np.where(scene.grid, ".", "#").astype("<U1")
for t in scene.targets:
    art[t.cell[1], t.cell[0]] = t.category[0].upper()
print("\n".join("".join(row) for row in art))

episodes = generate_episodes(scene, seed=0)
spec = episodes[0]
print(f"\nepisode {spec.episode_id}: agents start at {spec.starts}, looking for target(s) {spec.targets}")

# depth: a 16x16 range image, one ray per column across a narrow field of view
start = spec.starts[0]
pose = Pose.from_cell(start[0], start[1], start[2])
depth = render_depth(scene, pose, DepthConfig())
print(f"\ndepth image {depth.values.shape}, nearest wall {depth.values.min():.2f} m, "
      f"farthest reading {depth.values.max():.2f} m")

# audio: put one source down and listen from four headings on the same cell
cfg = AudioConfig.desk()
target = scene.targets[spec.targets[0]]
source = make_source(target.category, target.cell, 0, cfg)
print(f"\nlistening for a {target.category} at {target.cell} from {start[:2]}")
for heading in range(4):
    p = Pose.from_cell(start[0], start[1], heading)
    wave = render_binaural(scene, p, [source], cfg)
    spec_ = stft_spectrogram(wave, cfg.n_fft, cfg.hop)
    left, right = (float((spec_.magnitudes[c] ** 2).sum()) for c in range(2))
    print(f"  heading {heading}: left/right energy ratio {left / right:6.3f}")
print("\nThe ratio flips above and below 1 as the source moves from one side of the head to the other.")
