"""Print dense Mult-Add counts for the DeiT family and the toy model.

    python3 scripts/cost_table.py [--json]
"""
import argparse
import json

from spvit.cost import DEIT, build_cost_table
from spvit.model import ModelConfig
from spvit.verify import PUBLISHED_FFN_BASE, PUBLISHED_GMACS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--json", action="store_true", help="dump full tables as JSON")
    args = ap.parse_args()
    configs = {**DEIT, "toy": ModelConfig()}
    if args.json:
        print(json.dumps({n: build_cost_table(c).to_json() for n, c in configs.items()}, indent=2))
        return
    print(f"{'model':<11} {'total G':>9} {'msa G':>8} {'ffn G':>8} {'published':>9} {'rel':>7}")
    for name, cfg in configs.items():
        t = build_cost_table(cfg)
        ref = PUBLISHED_GMACS.get(name, (None,))[0]
        rel = f"{t.dense_total / 1e9 / ref - 1:+.1%}" if ref else ""
        print(f"{name:<11} {t.dense_total / 1e9:>9.3f} {t.msa_total / 1e9:>8.3f} "
              f"{t.ffn_total / 1e9:>8.3f} {ref or '':>9} {rel:>7}")
    ffn = build_cost_table(DEIT["deit_base"]).ffn_total / 1e9
    print(f"deit_base ffn subtotal {ffn:.3f}G vs {PUBLISHED_FFN_BASE[0]}G "
          f"({ffn / PUBLISHED_FFN_BASE[0] - 1:+.1%})")


if __name__ == "__main__":
    main()
