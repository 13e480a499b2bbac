import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vesselforge.manifest import AugmentationSpec, CaseRecord, Manifest  # noqa: E402
from vesselforge.maskgrid import write_vmsk  # noqa: E402
from vesselforge.pipeline import MANIFEST_NAME, cmd_augment  # noqa: E402
from vesselforge.synthgen import SynthParams, generate_case  # noqa: E402
from vesselforge.treeprune import write_graph  # noqa: E402

TINY = SynthParams(dims=(46, 52, 52), spacing=(4.0, 4.0, 4.0), branch_depth=4)


def write_balanced(out_dir: Path, per_class: int = 5, params: SynthParams = TINY, seed: int = 0) -> Manifest:
    """Fixed-label dataset: ``per_class`` cases of each class."""
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    (out_dir / "graphs").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(3 * per_class):
        label = ("none", "left", "right")[i % 3]
        cid = f"case{i:04d}"
        case = generate_case(replace(params, lvo_class=label, seed=seed * 1000 + i))
        write_vmsk(out_dir / "masks" / f"{cid}.vmsk", case.mask)
        write_graph(out_dir / "graphs" / f"{cid}.json", case.graph)
        records.append(CaseRecord(cid, f"masks/{cid}.vmsk", label, graph_path=f"graphs/{cid}.json", seed=i))
    m = Manifest(records, out_dir)
    m.write(out_dir / MANIFEST_NAME)
    return m


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    orig = write_balanced(root / "synth")
    spec = AugmentationSpec(per_anchor_count=1, anchor_counts=(4,), max_disp=6.0, master_seed=3)
    aug = cmd_augment(orig, root / "augmented", spec, workers=1)
    return {"root": root, "original": orig, "augmented": aug}


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE_RESULTS = {}
ACCEPTANCE_NOTES = {}


def note(criterion: int, text: str) -> None:
    """Attach a measured value to a criterion's summary line."""
    ACCEPTANCE_NOTES.setdefault(criterion, []).append(text)


def pytest_runtest_logreport(report):
    marker = "test_acceptance.py::test_criterion_"
    if marker not in report.nodeid:
        return
    if report.when != "call" and not report.failed:
        return
    key = int(report.nodeid.split(marker)[1].split("_")[0])
    prev = ACCEPTANCE_RESULTS.get(key, True)
    ACCEPTANCE_RESULTS[key] = prev and report.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ACCEPTANCE_RESULTS[k] else "FAIL"
        extra = "; ".join(ACCEPTANCE_NOTES.get(k, []))
        terminalreporter.write_line(f"criterion {k:2d}: {status}" + (f"  [{extra}]" if extra else ""))
