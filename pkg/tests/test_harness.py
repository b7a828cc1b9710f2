import numpy as np
import pytest

from featherstorm import attack as A
from featherstorm import harness as H
from featherstorm import models
from featherstorm.data import DatasetHandle, ImageTensor
from test_models import blobs, tiny_spec

CFG = A.AttackConfig(epsilon=0.2, alpha=0.05, steps=4, ensemble_n=3, n_b=2, tau=2)


@pytest.fixture(scope="module")
def world():
    train = blobs(80, seed=0)
    nets = {}
    for k, name in enumerate(("a", "b")):
        spec = tiny_spec(name)
        nets[name] = models.train(models.build(spec, k), train, 4, 0.1, k, augment=False)
    return nets, blobs(30, seed=11)


def test_asr_trivial_cases(world):
    nets, data = world
    net = nets["a"]
    good = [img for img in data.images if models.predict(net, img.pixels)[0] == img.label]
    assert H.attack_success_rate(net, [(g.pixels, g.pixels, g.label) for g in good]) == 0.0
    flipped = [(g.pixels, data[(g.id + 1) % len(data)].pixels, g.label) for g in good]
    expect = np.mean([models.predict(net, p[1])[0] != p[2] for p in flipped])
    assert H.attack_success_rate(net, flipped) == expect


def test_asr_count_oracle(world):
    nets, data = world
    net = nets["a"]
    good = [img for img in data.images if models.predict(net, img.pixels)[0] == img.label][:10]
    assert len(good) == 10
    other = {0: next(i for i in data.images if i.label == 1), 1: next(i for i in data.images if i.label == 0)}
    pairs = []
    for k, g in enumerate(good):
        adv = other[g.label].pixels if k < 3 else g.pixels
        pairs.append((g.pixels, adv, g.label))
    # direct count, independent of the scorer's batching
    fooled = sum(models.predict(net, a)[0] != y for _, a, y in pairs)
    assert fooled == 3
    assert H.attack_success_rate(net, pairs) == pytest.approx(0.3, abs=0)


def test_asr_denominator_skips_clean_mistakes(world):
    nets, data = world
    net = nets["a"]
    img = data[0]
    wrong = 1 - img.label
    pairs = [(img.pixels, img.pixels, img.label), (img.pixels, img.pixels, wrong)]
    assert H.score(net, pairs) == (0.0, 1)


def test_asr_errors(world):
    nets, data = world
    with pytest.raises(ValueError):
        H.attack_success_rate(nets["a"], [])
    img = data[0]
    with pytest.raises(H.UndefinedRateError):
        H.attack_success_rate(nets["a"], [(img.pixels, img.pixels, 1 - models.predict(nets["a"], img.pixels)[0])])


def test_scoring_rechecks_feasibility(world):
    nets, data = world
    img = data[0]
    with pytest.raises(H.FeasibilityError):
        H.score(nets["a"], [(img.pixels, np.clip(img.pixels + 0.3, 0, 1), img.label)], epsilon=0.2)
    with pytest.raises(H.FeasibilityError):
        H.check_feasible(np.zeros(3), np.array([0.0, -0.01, 0.0]), 0.1)


def test_transfer_matrix_rows_and_white_box(world):
    nets, data = world
    cfgs = [CFG.replace(variant=v) for v in ("MIM_CE", "SAFER")]
    rep = H.transfer_matrix(nets["a"], [nets["b"]], data, cfgs, 0, n_images=12)
    assert [(r.variant, r.target, r.white_box) for r in rep.rows] == [("MIM_CE", "b", False), ("SAFER", "b", False)]
    rep = H.transfer_matrix(nets["a"], [nets["b"], nets["a"]], data, cfgs, 0, n_images=12)
    assert len(rep.rows) == 4
    assert rep.row("MIM_CE", "a").white_box and not rep.row("MIM_CE", "b").white_box
    for r in rep.rows:
        assert 0 <= r.asr <= 1 and r.n > 0 and r.mean_linf <= CFG.epsilon + 1e-12


def test_white_box_mim_is_potent(world):
    nets, data = world
    # the blobs classes differ by 0.7 in brightness, so a 0.5 budget can swap them
    cfg = CFG.replace(variant="MIM_CE", epsilon=0.5, steps=10, alpha=0.1)
    rep = H.transfer_matrix(nets["a"], [nets["a"]], data, [cfg], 0)
    assert rep.row("MIM_CE", "a").asr >= 0.9


def test_csv_canonical_and_deterministic(world):
    nets, data = world
    cfgs = [CFG.replace(variant=v) for v in ("SAFER", "FIA", "MIM_CE")]
    a = H.transfer_matrix(nets["a"], [nets["b"], nets["a"]], data, cfgs, 3, n_images=12).to_csv()
    b = H.transfer_matrix(nets["a"], [nets["b"], nets["a"]], data, cfgs, 3, n_images=12).to_csv()
    assert a == b
    assert "\r" not in a and a.endswith("\n")
    lines = a.splitlines()
    body = [l for l in lines if not l.startswith("#")]
    assert body[0] == H.CSV_HEADER
    keys = [tuple(l.split(",")[:2]) for l in body[1:]]
    assert keys == sorted(keys)
    assert all(l.endswith(",") for l in body[1:])
    assert any(l.startswith("# seed=3") for l in lines)
    assert any(l.startswith("# asr_denominator=") for l in lines)
    assert any(l.startswith("# config_digest=" + A.config_digest(cfgs)) for l in lines)


def test_csv_number_format():
    rep = H.EvalReport("s", [H.ReportRow("X", "t", False, 1 / 3, 7, 0.0627450980392, 1.23456)], 0, "d")
    row = rep.to_csv().splitlines()[-1]
    assert row == "X,t,0,0.333333333,7,0.062745098,"
    assert rep.to_csv(timing=True).splitlines()[-1].endswith(",1.235")


def test_report_row_invariants():
    with pytest.raises(ValueError):
        H.ReportRow("X", "t", False, 1.5, 3, 0.0)
    with pytest.raises(ValueError):
        H.ReportRow("X", "t", False, 0.5, 0, 0.0)


def test_worker_count_does_not_change_bytes(world):
    nets, data = world
    cfgs = [CFG.replace(variant="SAFER")]
    one = H.transfer_matrix(nets["a"], [nets["b"]], data, cfgs, 5, workers=1).to_csv()
    two = H.transfer_matrix(nets["a"], [nets["b"]], data, cfgs, 5, workers=2).to_csv()
    assert one == two


def test_chunking_does_not_change_results(world, monkeypatch):
    nets, data = world
    cfg = CFG.replace(variant="SAFER")
    imgs = data.images[:10]
    full = H.attack_images(nets["a"], imgs, data, cfg, 1)
    monkeypatch.setattr(H, "CHUNK", 3)
    # rows of a batch are independent, so smaller chunks only reorder work
    small = H.attack_images(nets["a"], imgs, data, cfg, 1)
    for p, q in zip(full, small):
        np.testing.assert_allclose(p.x_adv.pixels, q.x_adv.pixels, atol=1e-12)


def test_ablation_cardinality_and_none_row(world):
    nets, data = world
    base = CFG.replace(variant="SAFER")
    rep = H.ablation_study(nets["a"], [nets["b"], nets["a"]], data, base, 2, n_images=10)
    assert len(rep.rows) == 4 * 2
    assert {r.variant for r in rep.rows} == set(H.ABLATION)
    solo = H.transfer_matrix(nets["a"], [nets["b"], nets["a"]], data, [base.replace(variant="MIM_CE")], 2,
                             n_images=10)
    for t in ("a", "b"):
        assert rep.row("MIM_CE", t) == solo.row("MIM_CE", t)
    with pytest.raises(ValueError):
        H.ablation_study(nets["a"], [nets["b"]], data, CFG.replace(variant="FIA"), 2)


def test_frequency_study_rows(world):
    nets, data = world
    rep = H.frequency_study(nets["a"], [nets["b"]], data, CFG, [], 0, n_images=8)
    assert [r.variant for r in rep.rows] == ["MIM_CE"]
    rep = H.frequency_study(nets["a"], [nets["b"], nets["a"]], data, CFG, [1, 3, 6], 0, n_images=8)
    assert len(rep.rows) == (3 + 1) * 2
    assert {r.variant for r in rep.rows} == {"MIM_CE", "HF_NOISE_tau01", "HF_NOISE_tau03", "HF_NOISE_tau06"}
    again = H.frequency_study(nets["a"], [nets["b"], nets["a"]], data, CFG, [1, 3, 6], 0, n_images=8)
    assert again.to_csv() == rep.to_csv()
    with pytest.raises(ValueError):
        H.frequency_study(nets["a"], [nets["b"]], data, CFG, [7], 0)


def test_dump_adv_names(world, tmp_path):
    nets, data = world
    H.transfer_matrix(nets["a"], [nets["b"]], data, [CFG.replace(variant="FIA")], 0, n_images=3,
                      dump_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(f"{data[k].id}_FIA.png" for k in range(3))


def test_mean_asr_excludes_white_box():
    rows = [H.ReportRow("V", "a", True, 1.0, 5, 0.1), H.ReportRow("V", "b", False, 0.2, 5, 0.1),
            H.ReportRow("V", "c", False, 0.4, 5, 0.1)]
    rep = H.EvalReport("a", rows, 0, "d")
    assert rep.mean_asr("V") == pytest.approx(0.3)
    assert rep.mean_asr("V", include_white_box=True) == pytest.approx(1.6 / 3)


def test_report_sorted_on_construction():
    rows = [H.ReportRow("b", "t", False, 0.1, 1, 0.0), H.ReportRow("a", "u", False, 0.1, 1, 0.0),
            H.ReportRow("a", "t", False, 0.1, 1, 0.0)]
    assert [(r.variant, r.target) for r in H.EvalReport("s", rows, 0, "d").rows] == [("a", "t"), ("a", "u"),
                                                                                     ("b", "t")]


def test_eval_images_are_a_prefix():
    ds = DatasetHandle([ImageTensor(np.zeros((2, 2, 1)), k % 2, k) for k in range(5)], 2)
    assert [i.id for i in H.eval_images(ds, 3)] == [0, 1, 2]
