import argparse
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from errors import MissingInput
from logging_utils import setup_logging

PLOT_COLUMNS = ["series", "x", "y"]
STAGE_SERIES = ("defect_integral", "energy_error", "l2_increment", "margin_min")
SERIES_NAMES = {"defect_integral": "defect"}


def _series(name: str, x, y) -> pd.DataFrame:
    return pd.DataFrame({"series": name, "x": np.asarray(x, dtype=float), "y": np.asarray(y, dtype=float)})


def export_plot_data(metrics_path: str, output_path: str, wave_path: Optional[str] = None) -> pd.DataFrame:
    """
    Long-format (series, x, y) rows for defect decay, energy error and wave deviation.

    Stage series use x = stage; the deviation series uses x = lambda_hat and is
    followed by a single deviation_slope row with the fitted log-log slope.
    """
    logger = setup_logging()
    if not os.path.exists(metrics_path):
        raise MissingInput(f"metrics file not found: {metrics_path}")
    metrics = pd.read_csv(metrics_path)

    frames: List[pd.DataFrame] = []
    if not metrics.empty:
        stage = metrics["stage"]
        for column in STAGE_SERIES:
            frames.append(_series(SERIES_NAMES.get(column, column), stage, metrics[column]))
            if column == "defect_integral":
                with np.errstate(divide="ignore"):
                    frames.append(_series("log2_defect", stage, np.log2(metrics[column].to_numpy(dtype=float))))

    if wave_path and os.path.exists(wave_path):
        waves = pd.read_csv(wave_path)
        if not waves.empty:
            frames.append(_series("deviation", waves["lambda_hat"], waves["deviation"]))
            if len(waves) >= 2:
                slope = np.polyfit(np.log(waves["lambda_hat"]), np.log(waves["deviation"]), 1)[0]
                frames.append(_series("deviation_slope", [0.0], [slope]))

    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PLOT_COLUMNS)
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    df.to_csv(output_path, index=False, lineterminator="\n")
    logger.info("Wrote %d plot rows to %s", len(df), output_path)
    return df


def main() -> None:
    parser = argparse.ArgumentParser(
        description="Export long-format plot data from a metrics CSV",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python scripts/export_plot_data.py data/runs/metrics.csv data/plots/plot_data.csv
  python scripts/export_plot_data.py data/runs/metrics.csv out.csv --wave data/runs/wave_metrics.csv
        """,
    )
    parser.add_argument("metrics", help="Metrics CSV written by run_pipeline.py")
    parser.add_argument("output", help="Destination CSV")
    parser.add_argument("--wave", default=None, help="Wave metrics CSV for the deviation series")
    args = parser.parse_args()
    try:
        export_plot_data(args.metrics, args.output, args.wave)
    except Exception as exc:
        print(f"\n\nExport failed: {exc}")
        sys.exit(1)


if __name__ == "__main__":
    main()
