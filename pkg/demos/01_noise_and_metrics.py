"""Degrade an image, then score the noisy copy and a Gaussian-filter baseline.

Run:  python demos/01_noise_and_metrics.py
"""
import math

from _common import out
from qtdenoise.image import add_gaussian_noise, compute_metrics, gaussian_filter, save_image
from qtdenoise.synthetic import ar_quadrants

clean = ar_quadrants(64, seed=0)
save_image(clean, out("clean.png"))

# Noise is seeded and unclamped; saving clamps to 8 bits.
for sigma, kernel in [(5, 0.1), (10, 0.17), (15, 0.33)]:
    noisy = add_gaussian_noise(clean, sigma, seed=1)
    smooth = gaussian_filter(noisy, kernel)
    m_noisy = compute_metrics(clean, noisy)
    m_smooth = compute_metrics(clean, smooth)
    print(f"sigma={sigma:>2}: noisy PSNR {m_noisy.psnr:6.2f} dB "
          f"(ideal {20 * math.log10(255 / sigma):.2f}), filtered {m_smooth.psnr:6.2f} dB, "
          f"SSIM {m_noisy.ssim:.3f} -> {m_smooth.ssim:.3f}")
    save_image(noisy, out(f"noisy_{sigma}.png"))

# Identical images give the infinity marker.
print("self-comparison:", compute_metrics(clean, clean))
