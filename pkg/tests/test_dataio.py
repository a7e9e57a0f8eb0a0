import numpy as np
import pytest

from plausicf.dataio import read_dataset_csv, write_dataset_csv
from plausicf.schema import SchemaError
from plausicf.synthetic import make_credit_fixture


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        schema, rows, labels, _ = make_credit_fixture(n=25, seed=3)
        path = tmp_path / "data.csv"
        write_dataset_csv(str(path), schema, rows, labels)
        rows_back, labels_back = read_dataset_csv(str(path), schema)
        assert len(rows_back) == 25
        np.testing.assert_array_equal(labels_back, labels)
        for original, loaded in zip(rows, rows_back):
            for spec, a, b in zip(schema.features, original, loaded):
                if spec.kind.tag == "continuous":
                    assert float(b) == pytest.approx(float(a), rel=1e-9)
                else:
                    assert a == b

    def test_header_mismatch_rejected(self, tmp_path):
        schema, rows, labels, _ = make_credit_fixture(n=5, seed=3)
        path = tmp_path / "data.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(SchemaError, match="header"):
            read_dataset_csv(str(path), schema)

    def test_empty_file_rejected(self, tmp_path):
        schema, *_ = make_credit_fixture(n=5, seed=3)
        path = tmp_path / "data.csv"
        path.write_text("")
        with pytest.raises(SchemaError, match="empty dataset"):
            read_dataset_csv(str(path), schema)

    def test_header_only_rejected(self, tmp_path):
        schema, *_ = make_credit_fixture(n=5, seed=3)
        path = tmp_path / "data.csv"
        header = ",".join([f.name for f in schema.features] + [schema.target_name])
        path.write_text(header + "\n")
        with pytest.raises(SchemaError, match="empty dataset"):
            read_dataset_csv(str(path), schema)

    def test_bad_cell_reports_line(self, tmp_path):
        schema, rows, labels, _ = make_credit_fixture(n=2, seed=3)
        path = tmp_path / "data.csv"
        write_dataset_csv(str(path), schema, rows, labels)
        text = path.read_text().splitlines()
        text[1] = text[1].replace(text[1].split(",")[0], "not-a-number", 1)
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(SchemaError, match="line 2"):
            read_dataset_csv(str(path), schema)


class TestSyntheticFixture:
    def test_deterministic(self):
        a = make_credit_fixture(n=30, seed=9)
        b = make_credit_fixture(n=30, seed=9)
        assert a[1] == b[1]
        np.testing.assert_array_equal(a[2], b[2])

    def test_labels_are_classifier_sign(self):
        from plausicf.encoding import encode_dataset
        from plausicf.nn import forward_raw

        schema, rows, labels, mlp = make_credit_fixture(n=40, seed=2)
        encoded = encode_dataset(rows, schema)
        raw = np.array([forward_raw(mlp, x)[0] for x in encoded])
        np.testing.assert_array_equal(labels, (raw >= 0).astype(int))

    def test_both_classes_present(self):
        _, _, labels, _ = make_credit_fixture(n=200, seed=0)
        assert 0.2 < labels.mean() < 0.8

    def test_rows_conform_to_schema(self):
        from plausicf.encoding import normalize_dataset

        schema, rows, _, _ = make_credit_fixture(n=50, seed=5)
        normalize_dataset(rows, schema)  # raises on violation
