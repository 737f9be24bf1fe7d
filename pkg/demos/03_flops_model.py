"""Compare analytic online FLOPs of single-stage and two-stage extraction.

    python demos/03_flops_model.py
"""
from snipforge.encoders import EncoderConfig
from snipforge.flops import bert_base_config, flops_breakdown, flops_estimate

bert = bert_base_config()
dq = flops_estimate("deepqse", bert, 160, 20)
for k in (5, 10, 20, 40, 80):
    eff = flops_estimate("efficient", bert, 160, k)
    print(f"K={k:3d}  efficient/deepqse = {eff / dq:.3f}")

# where the two-stage cost goes at the default toy size
parts = flops_breakdown("efficient", EncoderConfig(), 12, 4)
for name, v in sorted(parts["online_parts"].items(), key=lambda kv: -kv[1]):
    print(f"{name:24s} {v:>12,d}")
print("offline (cache build)", f"{parts['offline']:,d}")
