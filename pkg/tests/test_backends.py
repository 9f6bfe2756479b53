import json

import numpy as np
import pytest

from fundusgrade.backends import (
    ClassSet,
    Prediction,
    class_set_for,
    family_of_task,
    final_class_set,
    load_manifest,
    predict,
    tensor_checksum,
    update_retained,
    write_manifest,
)
from fundusgrade.errors import BackendError, ConfigError, InvalidInputError
from fundusgrade.preprocess import (
    DEFAULT_CHANNEL_STATS,
    STAGE_MINMAX,
    STAGE_STANDARDIZED,
    TensorImage,
    minmax_normalize,
    standardize,
)

from conftest import make_stub, make_table, random_raw
import onnx_builder as ob


def std_crop(seed=0, source="img.png", crop=0) -> TensorImage:
    rng = np.random.default_rng(seed)
    raw = random_raw(rng, h=224, w=224, source=source)
    tensor = minmax_normalize(raw)
    tensor = TensorImage(values=tensor.values, stage=STAGE_MINMAX, source=source, crop=crop)
    return standardize(tensor, DEFAULT_CHANNEL_STATS)


class TestClassSets:
    def test_task_class_sets(self):
        assert class_set_for("dr-primary").labels == ("Normal", "Mild", "Moderate", "S-(N)-PDR")
        assert class_set_for("dr-expert").labels == ("Severe", "PDR")
        assert class_set_for("dme-m1").labels == ("NoExudates", "Exudates")
        assert class_set_for("dme-m2").labels == ("NotGrade2", "Grade2")

    def test_unknown_task(self):
        with pytest.raises(ConfigError):
            class_set_for("dr")

    def test_family_mapping(self):
        assert family_of_task("dr-primary") == "dr"
        assert family_of_task("dme-m2") == "dme"
        with pytest.raises(ConfigError):
            family_of_task("nope")

    def test_final_class_sets(self):
        assert final_class_set("dr").size == 5
        assert final_class_set("dme").size == 3
        with pytest.raises(ConfigError):
            final_class_set("dr-primary")

    def test_validation(self):
        with pytest.raises(ConfigError):
            ClassSet(("only",))
        with pytest.raises(ConfigError):
            ClassSet(("a", "a"))
        cs = ClassSet(("a", "b"))
        assert cs.index_of("b") == 1
        with pytest.raises(ConfigError):
            cs.index_of("c")


class TestPrediction:
    def test_argmax(self):
        assert Prediction.from_scores([0.1, 0.7, 0.2]).label == 1

    def test_tie_takes_lowest_index(self):
        assert Prediction.from_scores([0.4, 0.4, 0.2]).label == 0
        assert Prediction.from_scores([0.0, 0.5, 0.5]).label == 1

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            Prediction.from_scores([0.0, np.nan])

    def test_rejects_matrix(self):
        with pytest.raises(InvalidInputError):
            Prediction.from_scores([[0.1, 0.9]])


def manifest_doc():
    return {
        "models": [
            {"id": "a", "kind": "stub", "task": "dr-primary", "config": {"label": 2}},
            {"id": "b", "kind": "stub", "task": "dr-primary", "config": {"scores": [0.1, 0.2, 0.3, 0.4]}},
            {"id": "x", "kind": "table", "task": "dme-m1",
             "config": {"key": "source", "entries": {"img.png": 1}, "default": 0}},
        ],
        "retained": {"dr-primary": ["a"]},
    }


def write_doc(tmp_path, doc, name="manifest.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestLoadManifest:
    def test_round_trip(self, tmp_path):
        path = write_doc(tmp_path, manifest_doc())
        manifest = load_manifest(path)
        assert [m.id for m in manifest.models] == ["a", "b", "x"]
        assert manifest.retained == {"dr-primary": ("a",)}
        assert manifest.for_task("dr-primary")[0].class_set.size == 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_manifest(tmp_path / "none.json")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_manifest(path)

    def test_no_models(self, tmp_path):
        with pytest.raises(ConfigError, match="declares no models"):
            load_manifest(write_doc(tmp_path, {"models": []}))

    def test_duplicate_id(self, tmp_path):
        doc = manifest_doc()
        doc["models"][1]["id"] = "a"
        with pytest.raises(ConfigError, match="duplicate id"):
            load_manifest(write_doc(tmp_path, doc))

    def test_unknown_kind(self, tmp_path):
        doc = manifest_doc()
        doc["models"][0]["kind"] = "tensorflow"
        with pytest.raises(ConfigError, match="unknown kind"):
            load_manifest(write_doc(tmp_path, doc))

    def test_unknown_task(self, tmp_path):
        doc = manifest_doc()
        doc["models"][0]["task"] = "dr"
        with pytest.raises(ConfigError, match="unknown task"):
            load_manifest(write_doc(tmp_path, doc))

    def test_class_set_mismatch(self, tmp_path):
        doc = manifest_doc()
        doc["models"][0]["class_set"] = ["a", "b", "c", "d"]
        with pytest.raises(ConfigError, match="does not match task"):
            load_manifest(write_doc(tmp_path, doc))

    def test_matching_class_set_accepted(self, tmp_path):
        doc = manifest_doc()
        doc["models"][0]["class_set"] = ["Normal", "Mild", "Moderate", "S-(N)-PDR"]
        load_manifest(write_doc(tmp_path, doc))

    def test_stub_label_out_of_range(self, tmp_path):
        doc = manifest_doc()
        doc["models"][0]["config"] = {"label": 4}
        with pytest.raises(ConfigError, match="label 4"):
            load_manifest(write_doc(tmp_path, doc))

    def test_stub_scores_wrong_length(self, tmp_path):
        doc = manifest_doc()
        doc["models"][1]["config"] = {"scores": [0.5, 0.5]}
        with pytest.raises(ConfigError, match="exactly 4 entries"):
            load_manifest(write_doc(tmp_path, doc))

    def test_table_bad_key_mode(self, tmp_path):
        doc = manifest_doc()
        doc["models"][2]["config"]["key"] = "filename"
        with pytest.raises(ConfigError, match="key mode"):
            load_manifest(write_doc(tmp_path, doc))

    def test_table_bad_entry_label(self, tmp_path):
        doc = manifest_doc()
        doc["models"][2]["config"]["entries"]["img.png"] = 7
        with pytest.raises(ConfigError, match="label 7"):
            load_manifest(write_doc(tmp_path, doc))

    def test_table_bad_per_crop_entry(self, tmp_path):
        doc = manifest_doc()
        doc["models"][2]["config"]["entries"]["img.png"] = [0, 1, 9]
        with pytest.raises(ConfigError, match="label 9"):
            load_manifest(write_doc(tmp_path, doc))

    def test_onnx_path_required_and_checked(self, tmp_path):
        doc = {"models": [{"id": "m", "kind": "onnx-file", "task": "dr-expert"}]}
        with pytest.raises(ConfigError, match="needs a 'path'"):
            load_manifest(write_doc(tmp_path, doc))
        doc["models"][0]["path"] = "missing.onnx"
        with pytest.raises(ConfigError, match="not found"):
            load_manifest(write_doc(tmp_path, doc))

    def test_onnx_path_resolved_relative_to_manifest(self, tmp_path):
        sub = tmp_path / "bundle"
        sub.mkdir()
        w = np.zeros((2, 3 * 224 * 224), dtype=np.float32)
        (sub / "m.onnx").write_bytes(ob.linear_classifier(w, np.zeros(2, dtype=np.float32)))
        doc = {"models": [{"id": "m", "kind": "onnx-file", "task": "dr-expert", "path": "m.onnx"}]}
        manifest = load_manifest(write_doc(sub, doc))
        assert manifest.models[0].path == (sub / "m.onnx").resolve()

    def test_retained_unknown_id(self, tmp_path):
        doc = manifest_doc()
        doc["retained"] = {"dr-primary": ["ghost"]}
        with pytest.raises(ConfigError, match="ghost"):
            load_manifest(write_doc(tmp_path, doc))

    def test_global_and_per_model_stats(self, tmp_path):
        doc = manifest_doc()
        doc["channel_stats"] = {"mean": [0.5, 0.5, 0.5], "std": [0.1, 0.1, 0.1]}
        doc["models"][1]["channel_stats"] = {"mean": [0, 0, 0], "std": [1, 1, 1]}
        manifest = load_manifest(write_doc(tmp_path, doc))
        assert manifest.models[0].channel_stats.mean == (0.5, 0.5, 0.5)
        assert manifest.models[1].channel_stats.std == (1.0, 1.0, 1.0)

    def test_bad_stats_rejected(self, tmp_path):
        doc = manifest_doc()
        doc["channel_stats"] = {"mean": [0, 0, 0], "std": [0, 1, 1]}
        with pytest.raises(ConfigError, match="positive"):
            load_manifest(write_doc(tmp_path, doc))

    def test_single_threaded_flag(self, tmp_path):
        doc = manifest_doc()
        doc["models"][0]["single_threaded"] = True
        manifest = load_manifest(write_doc(tmp_path, doc))
        assert manifest.models[0].single_threaded
        assert manifest.models[0]._lock is not None


class TestWriteAndUpdate:
    def test_write_then_load(self, tmp_path):
        path = write_manifest(
            tmp_path / "m.json",
            models=manifest_doc()["models"],
            retained={"dme-m1": ["x"]},
        )
        manifest = load_manifest(path)
        assert manifest.retained == {"dme-m1": ("x",)}

    def test_update_retained_preserves_rest(self, tmp_path):
        path = write_doc(tmp_path, manifest_doc())
        out = update_retained(path, tmp_path / "pruned.json", "dme-m1", ["x"])
        manifest = load_manifest(out)
        assert manifest.retained["dr-primary"] == ("a",)
        assert manifest.retained["dme-m1"] == ("x",)


class TestPredict:
    def test_stub_fixed_label(self):
        model = make_stub("s", "dr-primary", label=2)
        assert predict(model, std_crop()).label == 2

    def test_stub_scores(self):
        model = make_stub("s", "dr-primary", scores=[0.1, 0.2, 0.3, 0.4])
        assert predict(model, std_crop()).label == 3

    def test_requires_standardized_stage(self):
        model = make_stub("s", "dr-primary", label=0)
        tensor = TensorImage(values=np.zeros((3, 224, 224)), stage=STAGE_MINMAX)
        with pytest.raises(InvalidInputError, match="standardized"):
            predict(model, tensor)

    def test_requires_crop_size(self):
        model = make_stub("s", "dr-primary", label=0)
        tensor = TensorImage(values=np.zeros((3, 128, 128)), stage=STAGE_STANDARDIZED)
        with pytest.raises(InvalidInputError, match="224"):
            predict(model, tensor)

    def test_table_source_mode(self):
        model = make_table("t", "dme-m1", entries={"img.png": 1}, default=0)
        assert predict(model, std_crop(source="img.png")).label == 1
        assert predict(model, std_crop(source="other.png")).label == 0

    def test_table_per_crop_list(self):
        model = make_table("t", "dr-expert", entries={"img.png": [0, 1, 1, 0, 1, 0, 1, 0, 1, 1]})
        assert predict(model, std_crop(source="img.png", crop=0)).label == 0
        assert predict(model, std_crop(source="img.png", crop=4)).label == 1

    def test_table_per_crop_out_of_slots(self):
        model = make_table("t", "dr-expert", entries={"img.png": [0, 1]})
        with pytest.raises(BackendError, match="crop"):
            predict(model, std_crop(source="img.png", crop=5))

    def test_table_missing_key_names_model(self):
        model = make_table("lookup-7", "dme-m1", entries={"img.png": 1})
        with pytest.raises(BackendError) as excinfo:
            predict(model, std_crop(source="ghost.png"))
        assert excinfo.value.model_id == "lookup-7"

    def test_table_checksum_mode(self):
        crop = std_crop(seed=5, source="whatever.png")
        model = make_table("t", "dme-m2", entries={tensor_checksum(crop): 1}, key="checksum")
        assert predict(model, crop).label == 1

    def test_checksum_stable_and_content_sensitive(self):
        a = std_crop(seed=1)
        b = std_crop(seed=1)
        c = std_crop(seed=2)
        assert tensor_checksum(a) == tensor_checksum(b)
        assert tensor_checksum(a) != tensor_checksum(c)

    def test_onnx_file_backend(self, tmp_path):
        rng = np.random.default_rng(9)
        w = rng.normal(size=(2, 3 * 224 * 224), scale=0.001).astype(np.float32)
        b = np.array([0.0, 0.5], dtype=np.float32)
        model_path = tmp_path / "expert.onnx"
        model_path.write_bytes(ob.linear_classifier(w, b))
        doc = {"models": [{"id": "onnx1", "kind": "onnx-file", "task": "dr-expert",
                           "path": "expert.onnx"}]}
        manifest = load_manifest(write_doc(tmp_path, doc))
        model = manifest.models[0]

        crop = std_crop(seed=3)
        pred = predict(model, crop)
        feed = crop.values.astype(np.float32).reshape(1, -1).astype(np.float64)
        expected = feed @ w.astype(np.float64).T + b.astype(np.float64)
        np.testing.assert_allclose(pred.scores, expected.reshape(-1), rtol=1e-6, atol=1e-6)
        assert pred.label == int(np.argmax(expected))

    def test_onnx_wrong_score_count(self, tmp_path):
        w = np.zeros((3, 3 * 224 * 224), dtype=np.float32)  # 3 scores for a 2-class task
        model_path = tmp_path / "bad.onnx"
        model_path.write_bytes(ob.linear_classifier(w, np.zeros(3, dtype=np.float32)))
        doc = {"models": [{"id": "bad", "kind": "onnx-file", "task": "dme-m1",
                           "path": "bad.onnx"}]}
        manifest = load_manifest(write_doc(tmp_path, doc))
        with pytest.raises(BackendError, match="3 scores"):
            predict(manifest.models[0], std_crop())

    def test_onnx_graph_cached(self, tmp_path):
        w = np.zeros((2, 3 * 224 * 224), dtype=np.float32)
        (tmp_path / "m.onnx").write_bytes(ob.linear_classifier(w, np.zeros(2, dtype=np.float32)))
        doc = {"models": [{"id": "m", "kind": "onnx-file", "task": "dr-expert", "path": "m.onnx"}]}
        model = load_manifest(write_doc(tmp_path, doc)).models[0]
        predict(model, std_crop())
        first = model._graph
        predict(model, std_crop(seed=4))
        assert model._graph is first

    def test_single_threaded_predict(self):
        model = make_stub("s", "dme-m1", label=1, single_threaded=True)
        assert predict(model, std_crop()).label == 1
