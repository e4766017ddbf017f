"""Backend child process speaking newline-delimited JSON on stdin/stdout.

Serves a fixture store, which makes it a reference implementation of the
protocol that :class:`ovlift.backends.SubprocessBackend` expects::

    python -m ovlift.worker --fixtures path/to/store
"""

import argparse
import json
import sys
from types import SimpleNamespace

from .backends import FixtureBackend, encode_rle


def handle(backend, msg):
    op = msg.get("op")
    frame = SimpleNamespace(frame_id=msg.get("frame"), image_ref=msg.get("image", ""))
    if op == "segment":
        mask = backend.segment(frame, msg.get("prompt"), msg.get("points", []))
        if mask is None:
            return {"mask_rle": None}
        return {"mask_rle": encode_rle(mask), "height": int(mask.shape[0]), "width": int(mask.shape[1])}
    if op == "tag":
        return {"tags": list(backend.tag(frame))}
    if op == "embed_image":
        vec = backend.embed_image(frame, msg.get("box"), msg.get("prompt"))
        return {"vector": None if vec is None else [float(x) for x in vec]}
    if op == "embed_text":
        return {"vectors": [[float(x) for x in row] for row in backend.embed_texts(msg["texts"])]}
    raise ValueError(f"unknown op {op!r}")


def serve(backend, stdin=sys.stdin, stdout=sys.stdout):
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            stdout.write(json.dumps({"id": None, "error": "bad_json"}) + "\n")
            stdout.flush()
            continue
        try:
            resp = handle(backend, msg)
        except Exception as exc:  # reported to the client, not fatal to the worker
            resp = {"error": f"{type(exc).__name__}: {exc}"}
        resp["id"] = msg.get("id")
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--fixtures", required=True, help="fixture store directory")
    args = parser.parse_args(argv)
    serve(FixtureBackend(args.fixtures))


if __name__ == "__main__":
    main()
