"""Reference solution of u_t = 1e-5 u_xx + 5u - 5u^3 on [-1, 1], periodic,
u(0, x) = x^2 cos(pi x), written as data/allen_cahn_ref.csv with columns t,x,u.

Solved with a Fourier pseudo-spectral ETDRK4 scheme on a fine periodic grid
and sampled on linspace(0, 1, 100) x linspace(-1, 1, 256).
"""
import argparse
import pathlib

import numpy as np


def etdrk4_coefficients(L, h, contour_points=64):
    E = np.exp(h * L)
    E2 = np.exp(h * L / 2)
    r = np.exp(1j * np.pi * (np.arange(1, contour_points + 1) - 0.5) / contour_points)
    LR = h * L[:, None] + r[None, :]
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
    f1 = h * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
    f2 = h * np.real(np.mean((2 + LR + np.exp(LR) * (-2 + LR)) / LR**3, axis=1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR**2 + np.exp(LR) * (4 - LR)) / LR**3, axis=1))
    return E, E2, Q, f1, f2, f3


def solve(n_out_x=256, n_out_t=100, refine=8, dt=2e-5, diffusion=1e-5, reaction=5.0):
    n = (n_out_x - 1) * refine
    x = -1.0 + 2.0 * np.arange(n) / n
    k = np.pi * np.fft.rfftfreq(n, d=1.0 / n)  # wavenumbers for period 2
    L = -diffusion * k**2
    E, E2, Q, f1, f2, f3 = etdrk4_coefficients(L, dt)

    def nonlinear(v_hat):
        u = np.fft.irfft(v_hat, n)
        return np.fft.rfft(reaction * (u - u**3))

    v = np.fft.rfft(x**2 * np.cos(np.pi * x))
    t_out = np.linspace(0.0, 1.0, n_out_t)
    steps = np.rint(t_out / dt).astype(int)
    frames = []
    step = 0
    for target in steps:
        while step < target:
            Nv = nonlinear(v)
            a = E2 * v + Q * Nv
            Na = nonlinear(a)
            b = E2 * v + Q * Na
            Nb = nonlinear(b)
            c = E2 * a + Q * (2 * Nb - Nv)
            Nc = nonlinear(c)
            v = E * v + Nv * f1 + 2 * (Na + Nb) * f2 + Nc * f3
            step += 1
        u = np.fft.irfft(v, n)[::refine]
        frames.append(np.append(u, u[0]))  # x = 1 wraps to x = -1
    x_out = np.linspace(-1.0, 1.0, n_out_x)
    return t_out, x_out, np.array(frames)


def main():
    parser = argparse.ArgumentParser()
    here = pathlib.Path(__file__).resolve().parent
    parser.add_argument("--out", default=str(here.parent / "data" / "allen_cahn_ref.csv"))
    args = parser.parse_args()
    t, x, u = solve()
    with open(args.out, "w") as fh:
        fh.write("t,x,u\n")
        for i, ti in enumerate(t):
            for j, xj in enumerate(x):
                fh.write(f"{ti:.17g},{xj:.17g},{u[i, j]:.17g}\n")


if __name__ == "__main__":
    main()
