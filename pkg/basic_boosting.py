import numpy as np
from scipy.special import logsumexp

from vboost import Report, TargetModel, VariationalBoosting, VBoostConfig


class Banana(TargetModel):
    # two bent ridges: x_1 ~ N(+/- (x_0^2 / 2 - 1), 0.1), x_0 ~ N(0, 1)
    dim = 2

    def _branches(self, x):
        x = np.atleast_2d(x)
        bend = 0.5 * x[:, 0] ** 2 - 1.0
        return x, bend, np.stack(
            [
                -0.5 * x[:, 0] ** 2 - 5.0 * (x[:, 1] - bend) ** 2,
                -0.5 * x[:, 0] ** 2 - 5.0 * (x[:, 1] + bend) ** 2,
            ],
            axis=-1,
        )

    def log_density(self, x):
        _, _, branches = self._branches(x)
        return logsumexp(branches, axis=-1)

    def grad_log_density(self, x):
        x, bend, branches = self._branches(x)
        resp = np.exp(branches - logsumexp(branches, axis=-1, keepdims=True))
        upper = np.stack(
            [-x[:, 0] + 10.0 * (x[:, 1] - bend) * x[:, 0], -10.0 * (x[:, 1] - bend)], axis=-1
        )
        lower = np.stack(
            [-x[:, 0] - 10.0 * (x[:, 1] + bend) * x[:, 0], -10.0 * (x[:, 1] + bend)], axis=-1
        )
        return resp[:, :1] * upper + resp[:, 1:] * lower


if __name__ == "__main__":
    config = VBoostConfig(max_components=6, rank=1, seed=0)
    result = VariationalBoosting(Banana(), config).run()
    report = Report(result)
    report.print_stats()
    report.to_csv("output/banana")
