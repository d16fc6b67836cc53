#!/usr/bin/env python3
"""
Sweep the unification threshold of the decoder.

Trains one toy head on a scene with same-class overlap, then decodes its
output with several upsilon values and reports the metrics over all frames
and over the same-class overlap frames only.
"""

import os
import sys
from typing import Dict, List, Sequence

from dotenv import load_dotenv

# Add the repository root to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.config import Config  # noqa: E402
from src.experiment import evaluate_head, scene_spec_from_config, train_on_scene  # noqa: E402
from src.metrics import MetricsReport  # noqa: E402
from src.simulator import SceneSimulator  # noqa: E402

# Load environment variables
load_dotenv()

UPSILONS = (15.0, 30.0, 45.0)


def sweep(cfg: Config, upsilons: Sequence[float] = UPSILONS) -> List[Dict[str, MetricsReport]]:
    """
    Train once and evaluate every upsilon.

    Returns:
        List[Dict[str, MetricsReport]]: Per upsilon, "all" and "overlap" reports
    """
    scene = SceneSimulator(scene_spec_from_config(cfg, same_class_overlap_prob=1.0)).simulate()
    result = train_on_scene(cfg, scene)
    reports = []
    for upsilon in upsilons:
        reports.append(
            {
                "all": evaluate_head(cfg, result, scene, upsilon),
                "overlap": evaluate_head(cfg, result, scene, upsilon, overlap_only=True),
            }
        )
    return reports


def format_row(upsilon: float, reports: Dict[str, MetricsReport]) -> str:
    overall, overlap = reports["all"], reports["overlap"]
    return (
        f"{upsilon:>7g} | {overall.seld_error:.4f} | {overlap.seld_error:.4f} | "
        f"{overlap.delta_seld_error:+.4f} | {overlap.f20:.4f}"
    )


def main() -> int:
    """Main function."""
    print("AD-YOLO unification threshold sweep")
    print("=" * 60)

    cfg = Config()
    if not cfg.validate():
        print("Configuration validation failed. Please check your .env file.")
        return 1

    results = sweep(cfg)
    print(" upsilon | seld_all | seld_ovl | delta    | f20_ovl")
    for upsilon, reports in zip(UPSILONS, results):
        print(format_row(upsilon, reports))
    return 0


if __name__ == "__main__":
    sys.exit(main())
