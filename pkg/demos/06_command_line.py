"""The same pipeline through the command-line tool: noise, denoise, score,
and a two-image benchmark against the Gaussian filter.

Equivalent shell session:

    qtdenoise add-noise clean.png --sigma 10 --seed 1 --out noisy.png
    qtdenoise denoise noisy.png --sigma 10 --out restored.png --trace-out trace.csv
    qtdenoise metrics clean.png noisy.png restored.png
    qtdenoise benchmark clean_dir --sigma-list 10 --out report.csv
"""
import os

from _common import out
from qtdenoise.cli import main
from qtdenoise.image import save_image
from qtdenoise.synthetic import ar_quadrants

clean_dir = out("clean_dir")
os.makedirs(clean_dir, exist_ok=True)
for seed in (0, 1):
    save_image(ar_quadrants(32, seed=seed), os.path.join(clean_dir, f"quad{seed}.png"))
clean = os.path.join(clean_dir, "quad0.png")

fast = ["--set", "k=16", "--set", "max_iters=40"]
steps = [
    ["add-noise", clean, "--sigma", "10", "--seed", "1", "--out", out("noisy.png")],
    ["denoise", out("noisy.png"), "--sigma", "10", *fast, "--out", out("restored.png"),
     "--trace-out", out("trace.csv"), "--segmentation-out", out("restored_seg.png")],
    ["metrics", clean, out("noisy.png"), out("restored.png")],
    ["benchmark", clean_dir, "--sigma-list", "10", *fast, "--threads", "2", "--out", out("report.csv")],
    ["denoise", out("noisy.png"), "--out", out("x.png")],  # no sigma: exit status 1
]
for argv in steps:
    print("$ qtdenoise", " ".join(os.path.basename(a) if os.sep in a else a for a in argv))
    print(f"  -> exit status {main(argv)}")
