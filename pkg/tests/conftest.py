import pytest

from histrem import domain, synth


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    """10 patients / ~23 segments at 64px; the general-purpose fixture."""
    cfg = synth.SynthConfig(
        n_patients=10, segments_per_patient=(2, 3), images_per_segment=5,
        activity_fraction=0.3, seed=1,
    )
    out = tmp_path_factory.mktemp("small_ds")
    result = synth.generate(cfg, out)
    return synth_bundle(cfg, result)


@pytest.fixture(scope="session")
def clinic_scale_ds(tmp_path_factory):
    """87 patients / exactly 154 segments at 16px (fast to render)."""
    cfg = synth.SynthConfig(
        n_patients=87, segments_per_patient=(1, 2), total_segments=154,
        images_per_segment=5, image_size=16, activity_fraction=0.25, seed=3,
    )
    out = tmp_path_factory.mktemp("clinic_scale_ds")
    result = synth.generate(cfg, out)
    return synth_bundle(cfg, result)


@pytest.fixture(scope="session")
def tiny_ds16(tmp_path_factory):
    """6 patients / 12 segments at 16px for fast training tests."""
    cfg = synth.SynthConfig(
        n_patients=6, segments_per_patient=(2, 2), images_per_segment=5,
        image_size=16, activity_fraction=0.4, seed=5,
    )
    out = tmp_path_factory.mktemp("tiny_ds16")
    result = synth.generate(cfg, out)
    return synth_bundle(cfg, result)


class synth_bundle:
    def __init__(self, cfg, result):
        self.cfg = cfg
        self.result = result
        self.manifest_path = result.manifest_path
        self.dataset = domain.load_manifest(result.manifest_path)
