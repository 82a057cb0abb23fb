import tempfile
import unittest
from pathlib import Path

from numpy.testing import assert_array_equal

from app.config import HORSESHOE_GEOMETRY
from app.errors import ConfigurationError, GeometryFileError
from app.services.geometry_io import load_run_config, read_geometry, write_geometry

SINGLE_PATCH = """\
# unit square
patch 0 material air
degree 1 1
knots_u 0 0 1 1
knots_v 0 0 1 1
points 2 2
0 0
1 0
0 1
1 1
end
"""


class GeometryFileTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp_dir = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp_dir.name)

    def tearDown(self) -> None:
        self.tmp_dir.cleanup()

    def write(self, text: str, name: str = "model.geo") -> Path:
        path = self.dir / name
        path.write_text(text)
        return path

    def test_bundled_horseshoe_survives_rewrite(self) -> None:
        model = read_geometry(HORSESHOE_GEOMETRY)
        self.assertEqual(len(model.patches), 30)
        self.assertEqual(len(model.interfaces), 49)
        copy = self.dir / "copy.geo"
        write_geometry(model, copy)
        again = read_geometry(copy)
        for a, b in zip(model.patches, again.patches):
            self.assertEqual((a.material, a.degree, a.shape), (b.material, b.degree, b.shape))
            assert_array_equal(a.points, b.points)
            assert_array_equal(a.knots_u, b.knots_u)
        self.assertEqual(model.interfaces, again.interfaces)

    def test_weights_are_optional_per_patch(self) -> None:
        text = SINGLE_PATCH.replace("0 0\n1 0\n0 1\n1 1\n", "0 0 1\n1 0 2\n0 1 1\n1 1 1\n")
        record = read_geometry(self.write(text)).patches[0]
        assert_array_equal(record.weights, [1, 2, 1, 1])
        self.assertIsNone(read_geometry(self.write(SINGLE_PATCH)).patches[0].weights)

    def test_bad_degree_reports_its_line(self) -> None:
        path = self.write(SINGLE_PATCH.replace("degree 1 1", "degree 1 x"))
        with self.assertRaises(GeometryFileError) as ctx:
            read_geometry(path)
        self.assertIn(f"{path}:3:", str(ctx.exception))

    def test_unknown_keyword_reports_its_line(self) -> None:
        path = self.write(SINGLE_PATCH + "\nbogus 1 2\n")
        with self.assertRaises(GeometryFileError) as ctx:
            read_geometry(path)
        self.assertIn(":13: unexpected keyword 'bogus'", str(ctx.exception))

    def test_missing_end_raises(self) -> None:
        with self.assertRaises(GeometryFileError):
            read_geometry(self.write(SINGLE_PATCH.replace("end\n", "")))

    def test_short_point_list_raises(self) -> None:
        with self.assertRaises(GeometryFileError):
            read_geometry(self.write(SINGLE_PATCH.replace("1 1\nend", "end")))

    def test_interface_errors(self) -> None:
        with self.assertRaises(GeometryFileError):
            read_geometry(self.write(SINGLE_PATCH + "interface 0 east 0 up 0\n"))
        with self.assertRaises(GeometryFileError):
            read_geometry(self.write(SINGLE_PATCH + "interface 0 east 3 west 0\n"))

    def test_missing_file_is_a_configuration_error(self) -> None:
        with self.assertRaises(ConfigurationError):
            read_geometry(self.dir / "absent.geo")


class RunConfigFileTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp_dir = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp_dir.name)

    def tearDown(self) -> None:
        self.tmp_dir.cleanup()

    def write(self, text: str) -> Path:
        path = self.dir / "run.cfg"
        path.write_text(text)
        return path

    def test_dotted_keys_are_nested(self) -> None:
        path = self.write(
            "problem = poisson_peak\n"
            "elements = 8\n"
            "adaptivity.theta = 0.3\n"
            "adaptivity.marking = uniform\n"
            "materials.iron.mu_r = 500\n"
            "export.output_dir = out\n"
            "export.mesh_every_iteration = false\n"
        )
        config = load_run_config(path)
        self.assertEqual(config.elements, 8)
        self.assertEqual(config.adaptivity.theta, 0.3)
        self.assertEqual(config.adaptivity.marking, "uniform")
        self.assertEqual(config.materials["iron"].mu_r, 500.0)
        self.assertEqual(config.export.output_dir, (self.dir / "out").resolve())
        self.assertFalse(config.export.mesh_every_iteration)
        self.assertTrue(config.truncated)

    def test_geometry_is_resolved_next_to_the_config(self) -> None:
        (self.dir / "square.geo").write_text(SINGLE_PATCH)
        config = load_run_config(self.write("problem = custom\ngeometry = square.geo\n"))
        self.assertEqual(config.geometry, (self.dir / "square.geo").resolve())

    def test_invalid_value_names_line_and_field(self) -> None:
        path = self.write("problem = poisson_peak\n\nadaptivity.theta = 1.5\n")
        with self.assertRaises(ConfigurationError) as ctx:
            load_run_config(path)
        self.assertIn(f"{path}:3: adaptivity.theta:", str(ctx.exception))

    def test_unknown_key_is_rejected(self) -> None:
        with self.assertRaises(ConfigurationError) as ctx:
            load_run_config(self.write("problem = poisson_peak\nsmoothing = 2\n"))
        self.assertIn("smoothing", str(ctx.exception))

    def test_custom_problem_needs_geometry(self) -> None:
        with self.assertRaises(ConfigurationError) as ctx:
            load_run_config(self.write("problem = custom\n"))
        self.assertIn("requires a geometry file", str(ctx.exception))

    def test_missing_geometry_file(self) -> None:
        with self.assertRaises(ConfigurationError):
            load_run_config(self.write("problem = custom\ngeometry = nowhere.geo\n"))

    def test_missing_config_file(self) -> None:
        with self.assertRaises(ConfigurationError):
            load_run_config(self.dir / "absent.cfg")


if __name__ == "__main__":
    unittest.main()
