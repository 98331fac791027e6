"""Generate a small synthetic corpus and verify apex spotting against the
generator's ground truth.

Every clip is a per-subject random texture deformed by a class-specific
motion template whose magnitude ramps up to a known apex frame and decays.
"""

import tempfile
from pathlib import Path

import numpy as np

from featref import SynthSpec, generate_synthetic, load_manifest, spot_apex
from featref.dataset import load_frames

work = Path(tempfile.mkdtemp(prefix="featref_demo_"))
spec = SynthSpec(n_subjects=4, clips_per_subject=6, n_classes=3,
                 frame_size=64, frames_per_clip=12, noise_sigma=0.02, seed=7)
samples = generate_synthetic(spec, work)
print(f"wrote {len(samples)} clips under {work}")
print(f"manifest: {work / 'manifest.jsonl'}")

reloaded = load_manifest(work / "manifest.jsonl")
print(f"manifest reloads {len(reloaded)} samples; "
      f"classes: {sorted({s.raw_label for s in reloaded})}")

print("\napex spotting vs generator ground truth (noise sigma = 0.02):")
hits = 0
for s in reloaded[:8]:
    spotted = spot_apex(load_frames(s))
    mark = "=" if spotted == s.apex_index else " "
    hits += spotted == s.apex_index
    print(f"  {s.clip_id} ({s.raw_label:>8}): annotated {s.apex_index}, "
          f"spotted {spotted} {mark}")

exact = sum(spot_apex(load_frames(s)) == s.apex_index for s in reloaded)
print(f"\nexact recovery on {exact}/{len(reloaded)} clips")

# the spotter is invariant to uniform brightness shifts
frames = load_frames(reloaded[0])
brightened = [np.clip(f + 0.2, 0, 1.2) for f in frames]
print(f"brightness-shifted clip spots the same frame: "
      f"{spot_apex(frames) == spot_apex(brightened)}")
