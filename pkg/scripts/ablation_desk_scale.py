"""Five-row ablation grid (2D/3D, MSE/edge-aware, DCGAN/UNet skips) at reduced epochs.

    python scripts/ablation_desk_scale.py --data runs/desk/data --out runs/ablation --seeds 0,1,2

Writes ablation.json / ablation.csv and prints the edge-aware over MSE
lesion-region MSE ratio for each architecture pair.
"""
import argparse
from pathlib import Path

from tvae import cli
from tvae.config import load_run_config

ROOT = Path(__file__).resolve().parents[1]

PAIRS = [
    ("T-VAE (2D) + Edge-Aware Loss", "T-VAE (2D) + MSE Loss"),
    ("T-VAE (3D-DCGAN) + Edge-Aware Loss", "T-VAE (3D-DCGAN) + MSE Loss"),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--config", default=str(ROOT / "configs" / "ablation_desk_scale.json"))
    ap.add_argument("--grid", action="append")
    args = ap.parse_args()

    cfg = load_run_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = cli.run_ablation(cfg, args.data, args.out, cli.parse_grid(args.grid), seeds)
    print(cli.table_csv(rows), end="")
    by_name = {r["model"]: r for r in rows}
    for edge, mse in PAIRS:
        if edge in by_name and mse in by_name:
            e, m = by_name[edge]["lesion_region_mse"], by_name[mse]["lesion_region_mse"]
            print(f"{edge.split(' + ')[0]}: edge-aware / MSE lesion-region MSE = {e / m:.3f}")


if __name__ == "__main__":
    main()
