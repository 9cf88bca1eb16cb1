#!/usr/bin/env python3
"""Toy adapter: g(x) = sum(x); transfer and failure mode chosen by argv."""
import json
import math
import sys

mode = sys.argv[1] if len(sys.argv) > 1 else "identity"
arity = int(sys.argv[2]) if len(sys.argv) > 2 else 2
transfer = "logistic" if mode == "logistic" else "identity"
print(json.dumps({"arity": arity, "transfer": transfer, "supports_g": True}), flush=True)

for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    msg = json.loads(line)
    if mode == "crash":
        sys.exit(3)
    if mode == "garbage":
        print("not json", flush=True)
        continue
    if mode == "short":
        print(json.dumps({"id": msg["id"], "values": []}), flush=True)
        continue
    g = [sum(row) for row in msg["X"]]
    if msg["op"] == "predict" and transfer == "logistic":
        values = [1.0 / (1.0 + math.exp(-v)) for v in g]
    else:
        values = g
    print(json.dumps({"id": msg["id"], "values": values}), flush=True)
