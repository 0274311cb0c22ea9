"""Reference child process for :class:`ctsr.ddnm.ExternalDenoiser`.

Run as ``python -m ctsr.denoise_server [--blur-std S]``; answers each request
frame on stdin with the shrinkage model's prediction on stdout until EOF.
"""

import argparse
import struct
import sys

import numpy as np

from .ddnm import LENGTH, NoiseSchedule, ShrinkageDenoiser, encode_response, read_exact


def serve(model, stdin, stdout):
    while True:
        head = stdin.read(4)
        if not head:
            return
        (length,) = LENGTH.unpack(head)
        body = read_exact(stdin, length)
        t, rows, cols = struct.unpack_from("<iii", body)
        x_t = np.frombuffer(body, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)
        stdout.write(encode_response(model(x_t, t)))
        stdout.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--blur-std", type=float, default=2.0)
    parser.add_argument("--noise-gain", type=float, default=2.0)
    parser.add_argument("--timesteps", type=int, default=1000)
    args = parser.parse_args(argv)
    model = ShrinkageDenoiser(args.blur_std, args.noise_gain, NoiseSchedule(T=args.timesteps))
    serve(model, sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    main()
