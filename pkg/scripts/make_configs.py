#!/usr/bin/env python3
"""Regenerate the checked-in experiment configs from the demo recipe."""

from pathlib import Path

from attrgen.demo import demo_config, smoke_config

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    configs = ROOT / "configs"
    configs.mkdir(exist_ok=True)
    demo_config().to_json(configs / "demo.json")
    smoke_config().to_json(configs / "smoke.json")
    print(f"wrote {configs / 'demo.json'}")
    print(f"wrote {configs / 'smoke.json'}")
