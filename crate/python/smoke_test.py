"""Builds the Python extension and exercises its main entry points.

Usage: python3 python/smoke_test.py [--skip-build]
"""

import argparse
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TINY = """
[federation]
n_owners = 4
participants = 2
rounds = 30
seed = 1

[model]
hidden = [32]

[watermark]
scheme = "blackcatt"
triggers = 40
lr_wm = 0.01
partners = 2

[data]
samples_per_owner = 120
test_samples = 200
aux_samples = 64
"""


def build_and_stage(dest, skip_build):
    if not skip_build:
        subprocess.run(
            ["cargo", "build", "--release", "-p", "blackcatt-py"],
            cwd=ROOT,
            check=True,
        )
    lib = os.path.join(ROOT, "target", "release", "libblackcatt.so")
    shutil.copy(lib, os.path.join(dest, "blackcatt.so"))
    sys.path.insert(0, dest)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--skip-build", action="store_true")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        build_and_stage(tmp, args.skip_build)
        import blackcatt as bc

        z = bc.threshold(100, 1e-6, 0.01)
        assert abs(z - 115.936) < 1e-3, z
        assert bc.score(3, 3, 0.25) > 0 > bc.score(2, 3, 0.25)

        cb = bc.Codebook(6, 50, q=10, seed=7)
        assert abs(sum(cb.bias(0)) - 1.0) < 1e-12
        assert len(cb.owner_labels(5)) == 50

        # A callable oracle that answers with owner 2's codeword.
        triggers = [float(i) for i in range(50)]
        report = bc.verify_model(lambda x: cb.label(2, int(x[0])), triggers, 1, cb)
        assert report.accused == [2], report
        assert report.t_star < 50

        try:
            bc.verify_model(lambda x: 1 / 0, triggers, 1, cb)
        except Exception as e:
            raise AssertionError("oracle errors must yield a partial report") from e

        run = os.path.join(tmp, "run")
        acc = bc.train(TINY, run)
        print(f"trained toy federation, test accuracy {acc:.3f}")
        own = os.path.join(run, "30", "owner_1.bcat")
        r = bc.accuse(run, own)
        print(f"own copy: ranking {r.ranking()}, accused {r.accused}")
        assert r.ranking()[0] == 1

        merged = bc.attack(run, [0, 3], os.path.join(tmp, "merged.bcat"))
        assert merged.input_dim == 32
        r = bc.verify_model(merged, bc.TriggerSet.load(os.path.join(run, "secret", "triggers_30.bin")).current(), 32, bc.Codebook.load(os.path.join(run, "secret", "codebook.bin")))
        print(f"merged copy of owners 0,3: accused {r.accused}, t* {r.t_star}")

        try:
            bc.accuse(os.path.join(tmp, "nowhere"), own)
        except bc.MissingArtifactError:
            pass
        else:
            raise AssertionError("missing run directory must raise MissingArtifactError")

        try:
            bc.train("[watermark]\nbogus = 1\n", run)
        except bc.ConfigError as e:
            assert "bogus" in str(e)
        else:
            raise AssertionError("unknown keys must raise ConfigError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
