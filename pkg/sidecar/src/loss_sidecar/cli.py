"""Entry point: loss-sidecar [--host H] [--port P] [--device D].

LOSS_SIDECAR_CACHE overrides the model weight cache directory (TORCH_HOME).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="loss-sidecar",
                                     description="Perceptual loss service (LPIPS + CLIP).")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=7301)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    cache = os.environ.get("LOSS_SIDECAR_CACHE")
    if cache:
        os.environ["TORCH_HOME"] = cache

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    from .models import LossModels
    from .server import serve

    serve(args.host, args.port, LossModels(device=args.device))
    return 0


if __name__ == "__main__":
    sys.exit(main())
