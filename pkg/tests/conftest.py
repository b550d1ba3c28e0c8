import numpy as np
import pytest

from tcnn.harness.data import PatchRecord

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fake_records(per_class=50, patches=15):
    """Manifest records without files, enough for split arithmetic."""
    out = []
    for label in ("ND", "MC", "AC"):
        for k in range(per_class):
            sid = f"{label}_{k:03d}"
            out += [PatchRecord(f"patches/{sid}_p{i}.png", label, sid, i) for i in range(patches)]
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def end_to_end_grad_errors(per_layer=4, seed=0, eps=1e-6, batch=2):
    """Relative errors of dLoss/dtheta on a random parameter sample, float64.

    Samples ``per_layer`` coordinates from every weight tensor and compares
    the backward pass against central differences of the full loss.
    """
    from tcnn import nn
    from tcnn.model import LAYER_NAMES, TCNN

    rng = np.random.default_rng(seed)
    model = TCNN(seed=seed, dtype=np.float64)
    x = rng.uniform(0, 1, size=(batch, 1, 224, 224))
    targets = rng.integers(0, 3, batch)
    _, _, grads = model.loss_and_grads(x, targets)

    def loss():
        logits = model.forward(x)
        return nn.softmax_xent(logits, targets)[1]

    errors = {}
    for layer in LAYER_NAMES:
        name = f"{layer}.weight"
        flat = model.params[name].reshape(-1)
        errs = []
        for i in rng.choice(flat.size, per_layer, replace=False):
            keep = flat[i]
            flat[i] = keep + eps
            plus = loss()
            flat[i] = keep - eps
            minus = loss()
            flat[i] = keep
            numeric = (plus - minus) / (2 * eps)
            errs.append(nn.relative_error(np.array(grads[name].reshape(-1)[i]), np.array(numeric)))
        errors[layer] = errs
    return errors


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Three synthetic images per class, written to disk with a manifest."""
    from tcnn.harness.synth import SynthConfig, synth_dataset

    root = tmp_path_factory.mktemp("corpus")
    records = synth_dataset(SynthConfig(images_per_class=3, seed=11), root)
    return root, records
