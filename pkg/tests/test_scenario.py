import numpy as np
import pytest

from remapsim.errors import ScenarioError
from remapsim.scenario import NoiseModel, base_distribution, from_dict, load_scenario

from conftest import tiny_raw


def test_bundled_scenario_loads(desk):
    assert desk.guest_pages == 32768
    assert set(desk.services) == {"apache-like", "nginx-like", "openssh-like"}
    desk.validate()
    assert desk.services["apache-like"].target == "index"


def test_tiny_layout_is_disjoint_and_seeded():
    a, b = from_dict(tiny_raw()), from_dict(tiny_raw())
    used = a.used_pages()
    assert len(np.unique(used)) == len(used)
    assert np.array_equal(used, b.used_pages())
    assert len(a.resources["logo"].gpas) == 3
    assert not np.array_equal(used, from_dict(tiny_raw(seed=2)).used_pages())


def test_explicit_pages_are_respected():
    raw = tiny_raw()
    raw["services"][0]["resources"][0]["gpas"] = [200]
    raw["kernel_common"] = [0, 1, 2]
    sc = from_dict(raw)
    assert sc.resources["index"].gpas == [200]
    assert sc.kernel_common.tolist() == [0, 1, 2]
    assert 200 not in sc.services["web"].service_common


def test_overlap_reported_with_line(tmp_path):
    text = """guest_pages: 64
kernel_common: [1, 2, 3]
services:
  - name: web
    service_common: [3, 4]
    resources:
      - {name: a, size_bytes: 4096}
"""
    f = tmp_path / "bad.yaml"
    f.write_text(text)
    with pytest.raises(ScenarioError) as err:
        load_scenario(f)
    assert err.value.line == 5
    assert str(err.value).startswith(f"{f}:5:")
    assert "page 3" in str(err.value)


def test_resource_overlap_line(tmp_path):
    text = """guest_pages: 64
services:
  - name: web
    resources:
      - {name: a, size_bytes: 4096, gpas: [7]}
      - {name: b, size_bytes: 4096,
         gpas: [7]}
"""
    f = tmp_path / "bad.yaml"
    f.write_text(text)
    with pytest.raises(ScenarioError) as err:
        load_scenario(f)
    assert err.value.line == 7


@pytest.mark.parametrize("patch, needle", [
    (lambda r: r["services"][0]["resources"][0].update(gpas=[1, 2]), "cannot hold"),
    (lambda r: r.update(guest_pages=20), "guest too small"),
    (lambda r: r["services"][0].update(volatile_draw=1.5), "[0, 1]"),
    (lambda r: r["services"][0].update(target="nope"), "unknown resource"),
    (lambda r: r["services"][0]["resources"][0].update(relocation_rate=0.1, sticky=True),
     "sticky"),
    (lambda r: r.update(page_size=1000), "power of two"),
    (lambda r: r["services"][0]["resources"][0].update(gpas=[999]), "outside guest range"),
])
def test_invalid_scenarios(patch, needle):
    raw = tiny_raw()
    patch(raw)
    with pytest.raises(ScenarioError, match=None) as err:
        from_dict(raw)
    assert needle in str(err.value)


def test_yaml_syntax_error_has_line(tmp_path):
    f = tmp_path / "broken.yaml"
    f.write_text("guest_pages: 64\nservices: [\n  {name: x\n")
    with pytest.raises(ScenarioError) as err:
        load_scenario(f)
    assert err.value.line is not None


def test_unknown_scenario_name():
    with pytest.raises(ScenarioError):
        load_scenario("no-such-scenario")


def test_noise_model_normalizes():
    nm = NoiseModel(20, 0.5, [("s", "a"), ("s", "b")], [1, 3])
    assert nm.weights.tolist() == [0.25, 0.75]
    assert nm.expected_requests == 10
    assert nm.share(("s", "b")) == 0.75
    with pytest.raises(ScenarioError):
        NoiseModel(-1, 0.5, [], [])


def test_base_distribution_spreads_service_weight(desk):
    pairs, w = base_distribution(desk)
    apache = sum(x for (s, _), x in zip(pairs, w) if s == "apache-like")
    assert apache == pytest.approx(desk.service_weights["apache-like"])
    pairs2, _ = base_distribution(desk, exclude=("apache-like", "index"))
    assert ("apache-like", "index") not in pairs2


def test_with_noise_leaves_original_untouched(tiny):
    other = tiny.with_noise(level=33)
    assert other.noise.level == 33 and tiny.noise.level == 0
