"""Single-window latency and file size for fp32 and fp16 weights at the default and tiny widths."""

import argparse
import json

from turntake.config import TINY_WIDTHS, ModelConfig
from turntake.fusion import build_model
from turntake.quantserve import bench_inference, machine_info, quantize_fp16


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--windows", type=int, default=20)
    p.add_argument("--repetitions", type=int, default=5)
    args = p.parse_args()
    print(json.dumps(machine_info()))
    for name, cfg in (("default", ModelConfig()), ("tiny d=4", ModelConfig(**TINY_WIDTHS))):
        params = build_model(cfg, seed=0)
        for label, m in (("fp32", params), ("fp16", quantize_fp16(params))):
            r = bench_inference(m, n_windows=args.windows, repetitions=args.repetitions)
            print(f"{name:<9} {label}  p50 {r['p50_ms']:7.2f} ms  p95 {r['p95_ms']:7.2f} ms  "
                  f"{r['file_bytes']:>10,} bytes")


if __name__ == "__main__":
    main()
