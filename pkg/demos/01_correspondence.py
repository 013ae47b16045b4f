"""Learn LR-to-HR correspondence on synthetic pairs and measure end-point error.

A teacher network is trained on HR/HR pairs, then a student that sees only
the x4-shrunk input is trained with the margin loss plus a distillation term
pulling its correlation volume toward the teacher's. Both are scored on a
held-out transformation benchmark alongside a fixed-feature matcher.

Runs in a few minutes on one CPU core:

    python demos/01_correspondence.py --steps 200
"""
import argparse
import time

import numpy as np
import torch

from refsr import aee
from refsr.contrastive import ContrastiveLossConfig, FixedFeatureMatcher, train_student, train_teacher
from refsr.data import TransformBenchmarkSpec, benchmark_pair, procedural_texture, synthetic_pairs
from refsr.imageio import to_tensor
from refsr.resize import bicubic_downsample


def held_out_aee(matcher, group, n=12, size=96):
    spec = TransformBenchmarkSpec.for_group(group, seed=11)
    errs = []
    for i in range(n):
        hr = procedural_texture((9001, i), (size, size))
        ref, _, gt, valid, _, _ = benchmark_pair(hr, spec, i)
        field = matcher.correspond(to_tensor(bicubic_downsample(hr, 4)), to_tensor(ref))
        errs.append(aee(field, gt, valid))
    return float(np.mean(errs))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=256)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--save", help="optional path for the student checkpoint")
    args = ap.parse_args()
    torch.manual_seed(0)

    pairs = synthetic_pairs(args.pairs, seed=0, crop=96)
    cfg = ContrastiveLossConfig(encoder_channels=(16, 32, 64), descriptor_dim=64, learning_rate=1e-4,
                                steps=args.steps, batch_size=8)
    print(f"{len(pairs)} pairs: LR input {pairs[0].lr_input.shape}, reference {pairs[0].hr_ref.shape}")

    t = time.time()
    teacher = train_teacher(pairs, cfg).matcher
    print(f"teacher trained in {time.time() - t:.0f} s")
    t = time.time()
    result = train_student(pairs, teacher, cfg)
    student = result.matcher
    print(f"student trained in {time.time() - t:.0f} s")

    # The student's field lives on the LR pixel lattice, measured in reference cells.
    fixed = FixedFeatureMatcher()
    print(f"\n{'group':8s} {'student AEE':>12s} {'fixed AEE':>10s}")
    for g in ("small", "medium", "large"):
        print(f"{g:8s} {held_out_aee(student, g):12.3f} {held_out_aee(fixed, g):10.3f}")

    if args.save:
        student.save(args.save)
        print(f"\nstudent saved to {args.save}")


if __name__ == "__main__":
    main()
