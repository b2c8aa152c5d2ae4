"""Smoke test for the tardis extension module.

Build and install first:
    maturin build --release -o dist && pip install dist/tardis-*.whl
"""
import json
import pathlib
import tempfile

import tardis

FIXTURE = pathlib.Path(__file__).resolve().parents[2] / "core" / "tests" / "fixtures" / "transport.jsonl"


def main():
    ds = tardis.Dataset.load(str(FIXTURE))
    assert len(ds) == 18, len(ds)
    assert ds.classes == ["transport_taxi", "transport_ticket", "transport_traffic"]

    seed = ds.sample_seed(3, rng_seed=1)
    assert len(seed) == 9
    assert all(e.label in ds.classes for e in seed.examples())

    sim = tardis.class_similarity(seed)
    assert sim["classes"] == ds.classes
    picked = tardis.select_ambiguous_classes(seed, "transport_taxi", n=5)
    assert [c for c, _ in picked] and all(c != "transport_taxi" for c, _ in picked)

    assert abs(tardis.cosine([1.0, 0.0], [2.0, 0.0]) - 1.0) < 1e-12
    v = tardis.embed("book a taxi")
    assert abs(tardis.cosine(v, [x * 3 for x in v]) - 1.0) < 1e-9

    aps = tardis.aps_report(ds, tag="full")
    assert aps["dataset_tag"] == "full" and aps["pair_coverage"] == "exact"
    acc = tardis.nearest_centroid_eval(ds, seed)
    assert acc["classifier"] == "nearest-centroid" and acc["n_test"] == 9

    assert tardis.parse_enumerated_items("1. one\n2. two\n3. three", 2) == ["one", "two"]
    assert tardis.default_config()["n_ambiguous"] == 5

    try:
        tardis.run_pipeline(str(FIXTURE), "/nonexistent", config_toml="k = 0")
    except tardis.ConfigError:
        pass
    else:
        raise AssertionError("k = 0 should be rejected")

    with tempfile.TemporaryDirectory() as tmp:
        run_dir = pathlib.Path(tmp) / "run"
        manifest = tardis.run_pipeline(
            str(FIXTURE), str(run_dir), config_toml="shots = 3\nrounds_per_class = 2\nn_ambiguous = 2\n"
        )
        assert manifest["complete"], manifest.get("error")
        first = (run_dir / "aligned.jsonl").read_bytes()
        (run_dir / "aligned.jsonl").unlink()
        resumed = tardis.resume(str(run_dir), "adapt")
        assert (run_dir / "aligned.jsonl").read_bytes() == first
        assert resumed["stages"] == manifest["stages"]
        exported = [json.loads(l) for l in (run_dir / "augmented.jsonl").read_text().splitlines()]
        assert len(exported) == 3 * 2 * 5 * 2 + 9

    print("smoke test ok")


if __name__ == "__main__":
    main()
