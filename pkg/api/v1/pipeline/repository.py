import re
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from loguru import logger

from core.exceptions import IngestError
from core.geometry import wind_from_meteorological, wind_to_meteorological
from core.schema import SourceSet, Survey
from optimizer.schema import OptimizerResult, SourceGrid
from sampler.schema import TraceTables
from sampler.summary import PosteriorSummary
from synth.schema import GroundTruth

SURVEY_COLUMNS = ["time_s", "east_m", "north_m", "alt_m", "conc_ppb", "wind_speed_ms", "wind_dir_deg_met"]
SOURCE_COLUMNS = ["east_m", "north_m", "half_width_m", "rate_m3s"]
FLOAT_FORMAT = "%.17g"
JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY

PathLike = Union[str, Path]


class PipelineRepository:
    """
    Reads and writes every artifact of the pipeline.

    CSV files keep 17 significant digits so floats survive a round trip; JSON files use
    sorted keys so identical inputs give identical bytes.
    """

    def write_frame(self, frame: pd.DataFrame, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return path

    def read_frame(self, path: PathLike) -> pd.DataFrame:
        return pd.read_csv(path)

    def write_json(self, payload: dict, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(orjson.dumps(payload, option=JSON_OPTIONS) + b"\n")
        return path

    def read_json(self, path: PathLike) -> dict:
        return orjson.loads(Path(path).read_bytes())

    def ingest_survey(self, path: PathLike) -> Survey:
        """
        Parse a survey CSV.

        Args:
            path: File with header
                ``time_s,east_m,north_m,alt_m,conc_ppb,wind_speed_ms,wind_dir_deg_met``.

        Returns:
            Survey: Measurements with wind converted to to-direction vectors.

        Raises:
            IngestError: On a missing file, a wrong header, a malformed row or
                non-increasing times; the message names the line.
        """
        path = Path(path)
        if not path.is_file():
            raise IngestError(f"survey file {path} does not exist")
        try:
            raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
        except pd.errors.EmptyDataError:
            raise IngestError(f"survey file {path} is empty", line=1)
        except pd.errors.ParserError as e:
            found = re.search(r"line (\d+)", str(e))
            raise IngestError(f"malformed row in {path}: {e}", line=int(found.group(1)) if found else None) from e
        if list(raw.columns) != SURVEY_COLUMNS:
            raise IngestError(f"expected header {','.join(SURVEY_COLUMNS)}, got {','.join(raw.columns)}", line=1)
        if len(raw) < 2:
            raise IngestError(f"survey file {path} needs at least two measurements", line=len(raw) + 2)

        values = raw.apply(pd.to_numeric, errors="coerce")
        bad = ~np.isfinite(values.to_numpy(dtype=float)).all(axis=1)
        if bad.any():
            row = int(np.argmax(bad))
            raise IngestError(f"malformed row {raw.iloc[row].tolist()}", line=row + 2)
        table = values.to_numpy(dtype=float)
        checks = [
            (np.concatenate([[False], np.diff(table[:, 0]) <= 0]), "time does not increase"),
            (table[:, 3] < 0, "altitude is negative"),
            (table[:, 5] < 0, "wind speed is negative"),
        ]
        for mask, message in checks:
            if mask.any():
                raise IngestError(message, line=int(np.argmax(mask)) + 2)
        logger.info(f"ingested {len(table)} measurements from {path}")
        return Survey(
            times=table[:, 0],
            positions=table[:, 1:4],
            concentrations=table[:, 4],
            wind=wind_from_meteorological(table[:, 5], table[:, 6]),
        )

    def write_survey(self, survey: Survey, path: PathLike) -> Path:
        speed, direction = wind_to_meteorological(survey.wind)
        frame = pd.DataFrame({
            "time_s": survey.times,
            "east_m": survey.positions[:, 0],
            "north_m": survey.positions[:, 1],
            "alt_m": survey.positions[:, 2],
            "conc_ppb": survey.concentrations,
            "wind_speed_ms": speed,
            "wind_dir_deg_met": direction,
        })
        return self.write_frame(frame, path)

    def sources_frame(self, sources: SourceSet) -> pd.DataFrame:
        locations = sources.locations()
        return pd.DataFrame({
            "east_m": locations[:, 0],
            "north_m": locations[:, 1],
            "half_width_m": sources.half_widths(),
            "rate_m3s": sources.rates(),
        })

    def read_sources(self, path: PathLike, height: float = 0.0) -> SourceSet:
        """
        Read sources from a CSV with header ``east_m,north_m,half_width_m,rate_m3s``.

        Raises:
            IngestError: On a missing file or wrong header.
        """
        path = Path(path)
        if not path.is_file():
            raise IngestError(f"source file {path} does not exist")
        frame = pd.read_csv(path)
        if list(frame.columns) != SOURCE_COLUMNS:
            raise IngestError(f"expected header {','.join(SOURCE_COLUMNS)}", line=1)
        return SourceSet.from_arrays(
            frame[["east_m", "north_m"]].to_numpy(dtype=float),
            frame["half_width_m"].to_numpy(dtype=float),
            frame["rate_m3s"].to_numpy(dtype=float),
            height,
        )

    def write_truth(self, truth: GroundTruth, out: Path) -> list:
        return [
            self.write_frame(self.sources_frame(truth.sources), out / "truth_sources.csv"),
            self.write_frame(truth.series_frame(), out / "truth_series.csv"),
        ]

    def grid_frame(self, grid: SourceGrid, values) -> pd.DataFrame:
        centers = grid.cell_centers()
        return pd.DataFrame({"east_m": centers[:, 0], "north_m": centers[:, 1], "value": np.asarray(values, dtype=float)})

    def write_grid(self, grid: SourceGrid, values, path: PathLike) -> Path:
        return self.write_frame(self.grid_frame(grid, values), path)

    def read_grid_values(self, grid: SourceGrid, path: PathLike) -> np.ndarray:
        frame = self.read_frame(path)
        if len(frame) != grid.m:
            raise IngestError(f"grid file {path} has {len(frame)} cells, expected {grid.m}")
        return frame["value"].to_numpy(dtype=float)

    def write_optimizer_result(self, result: OptimizerResult, survey: Survey, out: Path) -> list:
        fitted = result.background.evaluate(result.beta)
        return [
            self.write_grid(result.grid, result.grid.rates, out / "grid_map.csv"),
            self.write_json(result.grid.spec(), out / "grid_spec.json"),
            self.write_frame(pd.DataFrame({"index": np.arange(result.beta.shape[0]), "beta": result.beta}), out / "beta.csv"),
            self.write_frame(pd.DataFrame({
                "time_s": survey.times,
                "measured_ppb": survey.concentrations,
                "background_ppb": fitted,
                "residual_ppb": result.residual,
            }), out / "background_fit.csv"),
            self.write_frame(pd.DataFrame({
                "iteration": np.arange(1, result.iterations + 1),
                "objective": result.objective_trace,
            }), out / "objective_trace.csv"),
        ]

    def read_optimizer_output(self, out: Path) -> Tuple[SourceGrid, np.ndarray, dict]:
        """
        Fitted grid, beta and summary written by the optimize stage.

        Raises:
            FileNotFoundError: If any of the files is missing.
        """
        grid = SourceGrid.from_spec(self.read_json(out / "grid_spec.json"))
        grid = grid.with_rates(np.clip(self.read_grid_values(grid, out / "grid_map.csv"), 0.0, None))
        beta = self.read_frame(out / "beta.csv")["beta"].to_numpy(dtype=float)
        summary = self.read_json(out / "optimize_summary.json")
        return grid, beta, summary

    def write_trace(self, tables: TraceTables, out: Path) -> list:
        return [
            self.write_frame(tables.scalars, out / "trace_scalars.csv"),
            self.write_frame(tables.sources, out / "trace_sources.csv"),
            self.write_frame(tables.background, out / "trace_background.csv"),
            self.write_frame(tables.residuals, out / "trace_residuals.csv"),
            self.write_frame(tables.acceptance, out / "acceptance.csv"),
        ]

    def read_trace(self, out: Path) -> TraceTables:
        return TraceTables(
            scalars=self.read_frame(out / "trace_scalars.csv"),
            sources=self.read_frame(out / "trace_sources.csv"),
            background=self.read_frame(out / "trace_background.csv"),
            residuals=self.read_frame(out / "trace_residuals.csv"),
            acceptance=self.read_frame(out / "acceptance.csv"),
        )

    def write_summary(self, summary: PosteriorSummary, grid: SourceGrid, out: Path) -> list:
        return [
            self.write_grid(grid, summary.median, out / "map_median.csv"),
            self.write_grid(grid, summary.low, out / "map_p025.csv"),
            self.write_grid(grid, summary.high, out / "map_p975.csv"),
            self.write_frame(summary.background_band, out / "background_band.csv"),
            self.write_frame(summary.residuals, out / "residuals.csv"),
            self.write_frame(summary.acceptance, out / "acceptance_rates.csv"),
        ]

    def render(self, summary: PosteriorSummary, grid: SourceGrid, out: Path, dpi: int = 120, truth: Optional[SourceSet] = None) -> list:
        """Median map, background band and residual scatter as PNG files."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        (east0, east1), (north0, north1) = grid.extent
        paths = []

        fig, ax = plt.subplots(figsize=(6, 5))
        image = ax.imshow(
            summary.median.reshape(grid.ny, grid.nx), origin="lower", extent=(east0, east1, north0, north1), cmap="viridis"
        )
        if truth is not None and truth.m:
            locations = truth.locations()
            ax.scatter(locations[:, 0], locations[:, 1], marker="x", color="red", label="truth")
            ax.legend(loc="upper left")
        fig.colorbar(image, ax=ax, label="median emission rate (m3/s)")
        ax.set_xlabel("east (m)")
        ax.set_ylabel("north (m)")
        paths.append(out / "map_median.png")
        fig.savefig(paths[-1], dpi=dpi, bbox_inches="tight")
        plt.close(fig)

        band = summary.background_band
        if not band.empty:
            fig, ax = plt.subplots(figsize=(8, 3))
            ax.fill_between(band["measurement"], band["low_ppb"], band["high_ppb"], alpha=0.3, label="credible band")
            ax.plot(band["measurement"], band["median_ppb"], label="median")
            ax.set_xlabel("measurement")
            ax.set_ylabel("background (ppb)")
            ax.legend()
            paths.append(out / "background_band.png")
            fig.savefig(paths[-1], dpi=dpi, bbox_inches="tight")
            plt.close(fig)

        residuals = summary.residuals
        if "measured_ppb" in residuals:
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.scatter(residuals["measured_ppb"], residuals["residual_median_ppb"], s=4)
            ax.axhline(0.0, color="grey", linewidth=0.8)
            ax.set_xlabel("measured (ppb)")
            ax.set_ylabel("median residual (ppb)")
            paths.append(out / "residuals.png")
            fig.savefig(paths[-1], dpi=dpi, bbox_inches="tight")
            plt.close(fig)
        return paths

    def write_error(self, record: dict, out: Optional[Path]) -> Optional[Path]:
        if out is None or not Path(out).is_dir():
            return None
        return self.write_json(record, Path(out) / "error.json")
