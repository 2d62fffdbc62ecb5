import json

import pytest

# A desk-sized run that exercises every CLI stage in seconds.
TINY = {
    "data": {"frame_size": [16, 16], "frame_count": 60, "n_meta": 2, "n_target": 1, "adapt_prefix": 20},
    "model": {"input_frames": 2, "stage_channels": [4, 8], "plug_stage": 2, "n_prototypes": 3},
    "train": {"pretrain_steps": 6, "dpu_steps": 6, "batch_size": 4},
    "meta": {"steps": 2, "k_shot": 2, "episodes_per_batch": 2, "alpha_init": 0.01},
    "eval": {"shots": [0, 1, 2]},
    "ablate": {"prototypes": [1, 3], "plug_stages": [1, 2]},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


# -- acceptance report -------------------------------------------------------

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
