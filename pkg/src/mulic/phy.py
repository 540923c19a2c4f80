"""Uplink baseband chain: QPSK, block Rayleigh fading, AWGN, superposition, ZF."""
from dataclasses import dataclass, field

import numpy as np

ZF_MIN_GAIN = 1e-12

class DegenerateChannelError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    """Parameters of one uplink block.

    ``interferer_offsets_db`` holds the received power of each interferer
    relative to the desired user's received power, so ``N = 1 + len(offsets)``.
    With ``power_control`` the desired user's transmit power tracks its
    channel so that the block's received SNR is exactly ``desired_snr_db``;
    without it only the average over blocks is.
    """

    symbols_per_block: int
    desired_snr_db: float
    interferer_offsets_db: tuple = ()
    noise_variance: float = 1.0
    power_control: bool = True

    def __post_init__(self):
        if self.symbols_per_block <= 0:
            raise ValueError("symbols_per_block must be positive")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        object.__setattr__(self, "interferer_offsets_db", tuple(float(o) for o in self.interferer_offsets_db))

    @property
    def user_count(self):
        return 1 + len(self.interferer_offsets_db)


@dataclass
class BlockRealization:
    h_desired: complex
    h_interferers: list
    tx_symbols: list
    received: np.ndarray
    equalized: np.ndarray
    realized_sinr_db: float
    realized_snr_db: float = field(default=float("nan"))


def qpsk_modulate(bits):
    """Gray-mapped unit-power QPSK. ``bits`` must have even length."""
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size % 2:
        raise ValueError(f"QPSK needs an even number of bits, got {bits.size}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    pairs = bits.reshape(-1, 2)
    # 00 -> (+,+), 01 -> (+,-), 11 -> (-,-), 10 -> (-,+)
    re = 1.0 - 2.0 * pairs[:, 0]
    im = np.where(pairs[:, 0] == pairs[:, 1], re, -re)
    return (re + 1j * im) / np.sqrt(2.0)


def sample_rayleigh(rng, count):
    """i.i.d. CN(0, 1) channel taps."""
    if count < 1:
        raise ValueError("count must be >= 1")
    draws = rng.standard_normal((2, count))
    return (draws[0] + 1j * draws[1]) * np.sqrt(0.5)


def complex_awgn(rng, count, variance):
    draws = rng.standard_normal((2, count))
    return (draws[0] + 1j * draws[1]) * np.sqrt(variance / 2.0)


def zf_equalize(received, h_desired):
    if abs(h_desired) < ZF_MIN_GAIN:
        raise DegenerateChannelError(f"|h| = {abs(h_desired):.3e} is below {ZF_MIN_GAIN:g}")
    return np.asarray(received, dtype=np.complex128) / h_desired


def realized_sinr(h_desired, h_interferers_scaled, noise_variance):
    """SINR in dB of the desired user given power-scaled channel gains."""
    if not noise_variance > 0:
        raise ValueError("noise_variance must be positive")
    interference = sum(abs(h) ** 2 for h in h_interferers_scaled)
    return 10.0 * np.log10(abs(h_desired) ** 2 / (interference + noise_variance))


def transmit_block(rng, cfg):
    """Draw one block: fading, symbols, superposition and noise.

    Each interferer keeps the phase of its own Rayleigh draw while its
    magnitude is set so that its received power sits exactly
    ``offset`` dB below (or above) the desired user's received power.
    """
    n = cfg.symbols_per_block
    sigma2 = cfg.noise_variance
    g = sample_rayleigh(rng, 1 + len(cfg.interferer_offsets_db))
    g1 = g[0] / abs(g[0]) if cfg.power_control else g[0]
    h1 = np.sqrt(10.0 ** (cfg.desired_snr_db / 10.0) * sigma2) * g1

    tx = [qpsk_modulate(rng.integers(0, 2, 2 * n))]
    received = h1 * tx[0]
    h_int = []
    for offset_db, gk in zip(cfg.interferer_offsets_db, g[1:]):
        hk = np.sqrt(10.0 ** (offset_db / 10.0)) * abs(h1) * gk / abs(gk)
        xk = qpsk_modulate(rng.integers(0, 2, 2 * n))
        received = received + hk * xk
        h_int.append(complex(hk))
        tx.append(xk)
    received = received + complex_awgn(rng, n, sigma2)

    return BlockRealization(
        h_desired=complex(h1),
        h_interferers=h_int,
        tx_symbols=tx,
        received=received,
        equalized=zf_equalize(received, h1),
        realized_sinr_db=float(realized_sinr(h1, h_int, sigma2)),
        realized_snr_db=float(realized_sinr(h1, [], sigma2)),
    )
