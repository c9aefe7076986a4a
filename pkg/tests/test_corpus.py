"""Manifest parsing, haversine distances, and the city selection rules."""

import json
import math

import pytest

from personforge.corpus import (
    CityDef,
    DuplicateId,
    MissingGeoTag,
    ParseError,
    assign_city,
    filter_cities,
    haversine_km,
    load_city_table,
    load_manifest,
    validate_separation,
)

from conftest import make_record, manifest_row, write_jsonl

# frozen before implementation, from an independent haversine computation
LONDON = (51.5074, -0.1278)
PARIS = (48.8566, 2.3522)
LONDON_PARIS_KM = 343.55606034104164
HALF_CIRCUMFERENCE_KM = math.pi * 6371.0  # 20015.086796020572


class TestHaversine:
    def test_identity(self):
        assert haversine_km(10.0, 20.0, 10.0, 20.0) == 0.0

    def test_london_paris_oracle(self):
        d = haversine_km(*LONDON, *PARIS)
        assert abs(d - LONDON_PARIS_KM) < 1e-9
        assert abs(d - 343.5) < 1.0

    def test_half_circumference_oracle(self):
        d = haversine_km(0.0, 0.0, 0.0, 180.0)
        assert abs(d - HALF_CIRCUMFERENCE_KM) < 0.1

    def test_symmetry_random(self, rng):
        for _ in range(200):
            lat1, lat2 = rng.uniform(-90, 90, size=2)
            lon1, lon2 = rng.uniform(-180, 180, size=2)
            assert haversine_km(lat1, lon1, lat2, lon2) == haversine_km(
                lat2, lon2, lat1, lon1
            )

    def test_triangle_inequality_random(self, rng):
        for _ in range(200):
            lats = rng.uniform(-90, 90, size=3)
            lons = rng.uniform(-180, 180, size=3)
            ab = haversine_km(lats[0], lons[0], lats[1], lons[1])
            bc = haversine_km(lats[1], lons[1], lats[2], lons[2])
            ac = haversine_km(lats[0], lons[0], lats[2], lons[2])
            assert ac <= ab + bc + 1e-6


class TestLoadManifestJsonl:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        assert load_manifest(path) == []

    def test_rows_in_file_order(self, tmp_path):
        rows = [manifest_row(f"img{i}", lat=1.0 * i, lon=2.0 * i) for i in range(3)]
        path = write_jsonl(tmp_path / "m.jsonl", rows)
        records = load_manifest(path)
        assert [r.image_id for r in records] == ["img0", "img1", "img2"]
        assert records[1].lat == 1.0
        assert records[1].lon == 2.0

    def test_latitude_out_of_range(self, tmp_path):
        path = write_jsonl(tmp_path / "m.jsonl", [manifest_row("a", lat=123.0, lon=0.0)])
        with pytest.raises(ParseError) as exc:
            load_manifest(path)
        assert "latitude out of range" in str(exc.value)
        assert exc.value.line_no == 1

    def test_longitude_out_of_range(self, tmp_path):
        path = write_jsonl(tmp_path / "m.jsonl", [manifest_row("a", lat=0.0, lon=-181.0)])
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_lat_without_lon_rejected(self, tmp_path):
        path = write_jsonl(tmp_path / "m.jsonl", [{**manifest_row("a"), "lat": 10.0}])
        with pytest.raises(ParseError) as exc:
            load_manifest(path)
        assert "together" in str(exc.value)

    def test_duplicate_image_id(self, tmp_path):
        path = write_jsonl(tmp_path / "m.jsonl", [manifest_row("a"), manifest_row("a")])
        with pytest.raises(DuplicateId) as exc:
            load_manifest(path)
        assert exc.value.image_id == "a"
        assert exc.value.line_no == 2

    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"image_id": "a"\n')
        with pytest.raises(ParseError) as exc:
            load_manifest(path)
        assert exc.value.line_no == 1

    def test_nonpositive_dimensions(self, tmp_path):
        path = write_jsonl(tmp_path / "m.jsonl", [manifest_row("a", width=0)])
        with pytest.raises(ParseError):
            load_manifest(path)

    def test_null_geo_is_absent(self, tmp_path):
        path = write_jsonl(
            tmp_path / "m.jsonl",
            [{**manifest_row("a"), "lat": None, "lon": None}],
        )
        (record,) = load_manifest(path)
        assert not record.has_geo

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "m.xml"
        path.write_text("")
        with pytest.raises(ValueError):
            load_manifest(path, format="xml")


class TestLoadManifestCsv:
    HEADER = "image_id,path,width,height,lat,lon,timestamp\n"

    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(
            self.HEADER
            + "a,a.png,64,48,10.5,-20.25,1600000000\n"
            + "b,b.png,32,32,,,\n"
        )
        records = load_manifest(path, format="csv")
        assert len(records) == 2
        assert records[0].lat == 10.5
        assert records[0].lon == -20.25
        assert records[0].timestamp == 1600000000.0
        assert not records[1].has_geo
        assert records[1].timestamp is None

    def test_header_required(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("id,who,knows\n")
        with pytest.raises(ParseError) as exc:
            load_manifest(path, format="csv")
        assert exc.value.line_no == 1

    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("")
        assert load_manifest(path, format="csv") == []

    def test_field_count_enforced(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(self.HEADER + "a,a.png,64\n")
        with pytest.raises(ParseError) as exc:
            load_manifest(path, format="csv")
        assert exc.value.line_no == 2

    def test_line_numbers_offset_by_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(self.HEADER + "a,a.png,64,48,,,\n" + "b,b.png,64,48,123,0,\n")
        with pytest.raises(ParseError) as exc:
            load_manifest(path, format="csv")
        assert exc.value.line_no == 3


class TestAssignCity:
    CITIES = [
        CityDef("alpha", 10.0, 10.0, 50.0),
        CityDef("beta", 30.0, 30.0, 50.0),
    ]

    def test_record_at_center(self):
        record = make_record("r", lat=10.0, lon=10.0)
        assert assign_city(record, self.CITIES) == "alpha"

    def test_far_from_everything(self):
        record = make_record("r", lat=-60.0, lon=-120.0)
        assert assign_city(record, self.CITIES) is None

    def test_tie_breaks_to_smaller_city_id(self):
        cities = [CityDef("zeta", 10.0, 10.0, 50.0), CityDef("alpha", 10.0, 10.0, 50.0)]
        record = make_record("r", lat=10.0, lon=10.0)
        assert assign_city(record, cities) == "alpha"

    def test_requires_geo(self):
        with pytest.raises(MissingGeoTag):
            assign_city(make_record("r"), self.CITIES)

    def test_nearest_wins_within_radius(self):
        cities = [CityDef("near", 10.0, 10.0, 500.0), CityDef("far", 12.0, 10.0, 500.0)]
        record = make_record("r", lat=10.5, lon=10.0)
        assert assign_city(record, cities) == "near"


class TestFilterCities:
    def make_corpus(self, n_alpha: int, n_beta: int, n_nogeo: int = 0):
        records = []
        for i in range(n_alpha):
            records.append(make_record(f"a{i}", lat=10.0, lon=10.0))
        for i in range(n_beta):
            records.append(make_record(f"b{i}", lat=30.0, lon=30.0))
        for i in range(n_nogeo):
            records.append(make_record(f"n{i}"))
        cities = [CityDef("alpha", 10.0, 10.0, 50.0), CityDef("beta", 30.0, 30.0, 50.0)]
        return records, cities

    def test_small_city_dropped_with_its_records(self):
        records, cities = self.make_corpus(n_alpha=5, n_beta=2)
        kept, report = filter_cities(records, cities, min_count=3)
        assert {r.image_id for r in kept} == {f"a{i}" for i in range(5)}
        assert all(r.source_city == "alpha" for r in kept)
        assert report.counts == {"alpha": 5, "beta": 2}
        assert report.kept == {"alpha": True, "beta": False}

    def test_exactly_min_count_is_kept(self):
        records, cities = self.make_corpus(n_alpha=3, n_beta=0)
        kept, report = filter_cities(records, cities, min_count=3)
        assert len(kept) == 3
        assert report.kept["alpha"] is True

    def test_one_fewer_is_dropped(self):
        records, cities = self.make_corpus(n_alpha=2, n_beta=0)
        kept, report = filter_cities(records, cities, min_count=3)
        assert kept == []
        assert report.kept["alpha"] is False

    def test_empty_records(self):
        _, cities = self.make_corpus(0, 0)
        kept, report = filter_cities([], cities, min_count=3)
        assert kept == []
        assert report.counts == {"alpha": 0, "beta": 0}
        assert report.kept == {"alpha": False, "beta": False}

    def test_geoless_records_retained_unassigned(self):
        records, cities = self.make_corpus(n_alpha=4, n_beta=1, n_nogeo=2)
        kept, _ = filter_cities(records, cities, min_count=3)
        ids = {r.image_id for r in kept}
        assert {"n0", "n1"} <= ids
        assert "b0" not in ids
        assert all(r.source_city is None for r in kept if r.image_id.startswith("n"))

    def test_count_identity_on_fully_assigned_corpus(self):
        records, cities = self.make_corpus(n_alpha=7, n_beta=4)
        kept, report = filter_cities(records, cities, min_count=5)
        expected = sum(report.counts[c] for c in report.counts if report.kept[c])
        assert len(kept) == expected

    def test_report_json_shape(self):
        records, cities = self.make_corpus(n_alpha=1, n_beta=0)
        _, report = filter_cities(records, cities, min_count=1)
        assert report.to_json() == {
            "alpha": {"count": 1, "kept": True},
            "beta": {"count": 0, "kept": False},
        }


def equator_city(city_id: str, km_east: float) -> CityDef:
    """A city on the equator, km_east kilometers from (0, 0)."""
    return CityDef(city_id, 0.0, math.degrees(km_east / 6371.0), 50.0)


class TestValidateSeparation:
    def test_single_city_no_pairs(self):
        assert validate_separation([CityDef("a", 0, 0, 50)], 200.0) == []

    def test_close_pair_flagged(self):
        cities = [equator_city("a", 0.0), equator_city("b", 150.0)]
        violations = validate_separation(cities, 200.0)
        assert len(violations) == 1
        a, b, d = violations[0]
        assert (a, b) == ("a", "b")
        assert abs(d - 150.0) < 0.01

    def test_boundary_is_inclusive(self):
        # "at least min_km apart": a pair at exactly the threshold passes
        cities = [equator_city("a", 0.0), equator_city("b", 250.0)]
        d = haversine_km(cities[0].lat, cities[0].lon, cities[1].lat, cities[1].lon)
        assert validate_separation(cities, min_km=d) == []
        assert len(validate_separation(cities, min_km=math.nextafter(d, math.inf))) == 1

    def test_all_pairs_scanned(self):
        cities = [equator_city(c, i * 100.0) for i, c in enumerate("abcd")]
        violations = validate_separation(cities, 200.0)
        pairs = {(a, b) for a, b, _ in violations}
        assert pairs == {("a", "b"), ("b", "c"), ("c", "d")}


class TestCityTable:
    def test_load(self, tmp_path):
        path = tmp_path / "cities.json"
        path.write_text(
            json.dumps(
                [
                    {"city_id": "x", "lat": 1.0, "lon": 2.0, "radius_km": 30.0},
                    {"city_id": "y", "lat": 3.0, "lon": 4.0},
                ]
            )
        )
        cities = load_city_table(path)
        assert cities[0] == CityDef("x", 1.0, 2.0, 30.0)
        assert cities[1].radius_km == 50.0  # default

    def test_rejects_non_array(self, tmp_path):
        path = tmp_path / "cities.json"
        path.write_text("{}")
        with pytest.raises(ValueError):
            load_city_table(path)
