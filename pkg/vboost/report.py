from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from .mixture import MixtureApprox
from .models import RankSelection, VBoostResult
from .oracle import mixture_moment_table

TRACE_COLUMNS = ["stage", "step", "elbo_estimate", "grad_norm", "rank"]
STAGE_COLUMNS = ["stage", "n_components", "rank", "eval_elbo", "eval_se"]
COMPARE_COLUMNS = ["statistic", "vb_value", "oracle_value", "oracle_se"]


class Report:
    def __init__(self, result: VBoostResult) -> None:
        self.result = result

    def trace_frame(self) -> pd.DataFrame:
        rows = [
            (trace.stage, record.step, record.objective, record.grad_norm, trace.rank)
            for trace in self.result.traces
            for record in trace.records
        ]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    def stages_frame(self) -> pd.DataFrame:
        rows = [
            (s.stage, s.n_components, s.rank, s.evaluation.value, s.evaluation.std_error)
            for s in self.result.stages
        ]
        return pd.DataFrame(rows, columns=STAGE_COLUMNS)

    def print_stats(self) -> None:
        """Print report in text form"""

        mixture = self.result.mixture
        print(f"Components: {mixture.n_components} | Dimension: {mixture.dim}")
        print(f"Weights: {np.array2string(mixture.weights, precision=4)}")
        for summary in self.result.stages:
            print(
                f"Stage {summary.stage} (rank {summary.rank}): ELBO {summary.evaluation}"
            )
        if self.result.rank_selection is not None:
            selection = self.result.rank_selection
            flag = " (max_rank reached)" if selection.reached_max_rank else ""
            print(f"Selected rank: {selection.rank}{flag}")

    def to_csv(self, out_dir: Union[str, Path]) -> None:
        """Write trace.csv and stages.csv into `out_dir`"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.trace_frame().to_csv(out_dir / "trace.csv", index=False)
        self.stages_frame().to_csv(out_dir / "stages.csv", index=False)

    @staticmethod
    def rank_sweep_frame(selection: RankSelection) -> pd.DataFrame:
        """One row per fitted rank; pct_change is empty for rank 0"""
        frame = pd.DataFrame(
            {
                "rank": [record.rank for record in selection.records],
                "mean_marginal_variance": [
                    record.mean_marginal_variance for record in selection.records
                ],
                "pct_change": [
                    np.nan if record.pct_change is None else record.pct_change
                    for record in selection.records
                ],
            }
        )
        variances = np.stack([record.marginal_variances for record in selection.records])
        for d in range(variances.shape[1]):
            frame[f"var_{d}"] = variances[:, d]
        return frame

    @staticmethod
    def compare_moments_frame(
        mixture: MixtureApprox, oracle_table: pd.DataFrame
    ) -> pd.DataFrame:
        """Join the mixture's moments to an oracle moment table by statistic"""
        ours = mixture_moment_table(mixture)
        if list(ours["statistic"]) != list(oracle_table["statistic"]):
            raise ValueError("mixture and oracle moment tables list different statistics")
        return pd.DataFrame(
            {
                "statistic": ours["statistic"],
                "vb_value": ours["value"],
                "oracle_value": oracle_table["value"].to_numpy(),
                "oracle_se": oracle_table["se"].to_numpy(),
            },
            columns=COMPARE_COLUMNS,
        )
