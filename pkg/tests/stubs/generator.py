"""Line-delimited JSON generator stub wrapping the cooperative generator."""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from synthetic import CooperativeGenerator  # noqa: E402

gen = CooperativeGenerator()
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"completions": gen.generate(req["prompt"], req.get("n", 1))}), flush=True)
