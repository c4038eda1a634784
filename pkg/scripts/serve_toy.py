"""Serve a toy-model checkpoint over the JSON generation protocol.

    python3 scripts/serve_toy.py runs/x/checkpoint_before.npz --port 8000
    TSAS_BASE_URL=http://127.0.0.1:8000 tsas adapt --backend http --variant naive ...
"""

from __future__ import annotations

import argparse

from tsas.backends import make_server
from tsas.toymodel import ToyBackend, load_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8000)
    args = ap.parse_args()
    server = make_server(ToyBackend(load_checkpoint(args.checkpoint)), args.host, args.port)
    print(f"serving on http://{args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


if __name__ == "__main__":
    main()
