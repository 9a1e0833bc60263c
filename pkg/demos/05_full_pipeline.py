"""Drive the whole pipeline through the command-line interface.

Runs data generation, base/adapter/router training, prototype extraction,
zero-shot evaluation, and the combined report, all at toy scale inside a
temporary directory. The same subcommands scale to the full configuration.
"""

import os
import tempfile

from worldmix import cli

CONFIG = """
seed = 7

[model]
n_layers = 2
d_h = 16
rank = 2

[data]
seen_domains = 2
unseen_domains = 1
episodes_per_domain = 3
holdout = 1

[router]
d_h = 12
d_proj = 8
steps = 15
lr = 0.03
batch_size = 8
warmup = 3

[train]
base_steps = 10
adapter_steps = 12
batch_size = 8
warmup = 2

[routing]
k = 2

[eval]
episodes = 2
seeds = [0]
max_steps = 6
"""


def main():
    with tempfile.TemporaryDirectory() as tmp:
        os.environ["TMOW_RUN_DIR"] = os.path.join(tmp, "runs")
        cfg_path = os.path.join(tmp, "run.toml")
        with open(cfg_path, "w") as fh:
            fh.write(CONFIG)

        for command in ("gen-data", "train-base", "train-adapters", "pretrain-router",
                        "extract-prototypes", "eval-zero-shot", "report"):
            code = cli.main(["--config", cfg_path, command])
            assert code == 0, command

        run = cli.run_dir(cli.load_config(cfg_path))
        print("\nartifacts:")
        for name in sorted(os.listdir(run)):
            print(f"  {name}")
        with open(os.path.join(run, "report.txt")) as fh:
            print("\n" + fh.read())


if __name__ == "__main__":
    main()
