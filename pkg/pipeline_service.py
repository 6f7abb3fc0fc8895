"""End-to-end pipeline: stages, persisted intermediates, the published-layout tables and the run manifest."""
import codecs
import configparser
import hashlib
import io
import json
import logging
import os
from contextlib import contextmanager
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app import run_parallel
from cmev_service import CmevService
from exceptions import DataIOError, DataValidationError, StageError, TailDepError
from gpd_service import GpdService
from margin_service import margin_service
from market_data_service import market_data_service
from models import MarginScale, PipelineConfig, ReturnPanel, TailMode
from point_process_service import PointProcessService, format_estimate
from simulation_service import simulation_service
from threshold_service import threshold_service

RETURNS_FILE = "returns.csv"
LAPLACE_FILE = "laplace.csv"
FRECHET_FILE = "frechet.csv"
MARGINS_FILE = "margins.json"
CMEV_FILE = "cmev_fits.json"
PP_FILE = "pp_fits.json"
PP_DIAGNOSTICS_FILE = "pp_diagnostics.csv"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.md"
PLOT_SCRIPT = "plot_outputs.py"
PLOT_DIR = "plots"
PLOT_SAMPLE_ROWS = 5000
FLOAT_FORMAT = '%.4f'

# (section, key, field) triples of the INI layout
CONFIG_LAYOUT = [
    ("data", "input_path", "input_path"),
    ("data", "delimiter", "delimiter"),
    ("data", "return_scale", "return_scale"),
    ("marginal", "grid", "marginal_grid"),
    ("marginal", "default", "marginal_default"),
    ("marginal", "min_exceedances", "min_gpd_exceedances"),
    ("marginal", "histogram_bins", "histogram_bins"),
    ("marginal", "observations_per_year", "observations_per_year"),
    ("dependence", "quantile", "dependence_quantile"),
    ("dependence", "grid", "dependence_grid"),
    ("dependence", "min_exceedances", "min_ht_exceedances"),
    ("prediction", "quantile", "prediction_quantile"),
    ("prediction", "grid", "prediction_grid"),
    ("prediction", "target_quantile", "target_quantile"),
    ("prediction", "n_importance", "n_importance"),
    ("point_process", "quantile", "pp_quantile"),
    ("point_process", "hr_bands", "hr_bands"),
    ("point_process", "min_points", "min_pp_points"),
    ("run", "seed", "seed"),
    ("run", "n_restarts", "n_restarts"),
    ("run", "output_dir", "output_dir"),
]
OVERRIDES_SECTION = "marginal.overrides"
TUPLE_FIELDS = {"marginal_grid", "dependence_grid", "prediction_grid", "hr_bands"}

PLOT_SCRIPT_TEXT = '''"""Render every plot-data file of this run to PNG. Needs matplotlib, which the pipeline itself does not."""
import glob
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    for path in sorted(glob.glob(os.path.join(HERE, "plots", "*.csv"))):
        frame = pd.read_csv(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        if {"x", "y"} <= set(frame.columns):
            ax.scatter(frame["x"], frame["y"], s=4)
            for column in frame.columns.drop(["x", "y"]):
                if pd.api.types.is_numeric_dtype(frame[column]):
                    ax.plot(frame["x"], frame[column], label=column)
        else:
            frame.plot(ax=ax, legend=True)
        ax.set_title(os.path.basename(path)[:-4])
        fig.savefig(path[:-4] + ".png", dpi=120)
        plt.close(fig)


if __name__ == "__main__":
    main()
'''


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: PipelineConfig) -> str:
    """INI text of a configuration; load_config reads it back to an equal config"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    values = config.model_dump()
    for section, key, field in CONFIG_LAYOUT:
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = _format_value(values[field])
    # escaped so a tab survives the INI round trip
    parser["data"]["delimiter"] = config.delimiter.encode('unicode_escape').decode('ascii')
    parser.add_section(OVERRIDES_SECTION)
    for market_id, level in config.marginal_overrides.items():
        parser[OVERRIDES_SECTION][market_id] = repr(float(level))
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise DataIOError(f"cannot parse config {source}: {str(e)}")

    known = {(section, key): field for section, key, field in CONFIG_LAYOUT}
    values: Dict[str, Any] = {}
    for section in parser.sections():
        if section == OVERRIDES_SECTION:
            continue
        for key, raw in parser[section].items():
            field = known.get((section, key))
            if field is None:
                raise DataValidationError(f"unknown config key [{section}] {key}")
            raw = raw.strip()
            if field in TUPLE_FIELDS:
                values[field] = tuple(float(v) for v in raw.split(",") if v.strip())
            elif field in ("input_path", "target_quantile"):
                values[field] = raw or None
            elif field == "delimiter":
                values[field] = codecs.decode(raw, 'unicode_escape')
            else:
                values[field] = raw
    if parser.has_section(OVERRIDES_SECTION):
        values["marginal_overrides"] = {k: float(v) for k, v in parser[OVERRIDES_SECTION].items()}
    try:
        return PipelineConfig(**values)
    except (ValidationError, ValueError) as e:
        raise DataValidationError(f"invalid config {source}: {str(e)}")


def load_config(path: str) -> PipelineConfig:
    if not os.path.exists(path):
        raise DataIOError(f"config file not found: {path}")
    with open(path) as handle:
        return parse_config(handle.read(), source=path)


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(dump_config(config).encode('utf-8')).hexdigest()


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def markdown_table(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join(" --- " for _ in frame.columns) + "|"
    body = ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule] + body)


def market_grid(rows: List[str], columns: List[str], values: Dict[tuple, float]) -> pd.DataFrame:
    """Row-by-column table with a blank diagonal, as in the published layouts"""
    data = {c: [values.get((r, c), np.nan) for r in rows] for c in columns}
    return pd.DataFrame(data, index=pd.Index(rows, name='conditioning'))


class PipelineService:
    STAGES = ["ingest", "fit-gpd", "thresholds", "fit-cmev", "predict", "fit-pp", "compare", "report"]

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.output_dir
        self.gpd = GpdService(config.min_gpd_exceedances, config.n_restarts)
        self.cmev = CmevService(config.min_ht_exceedances, config.n_restarts)
        self.pp = PointProcessService(config.min_pp_points, config.n_restarts, config.hr_bands)
        os.makedirs(os.path.join(self.out, PLOT_DIR), exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def plot_path(self, name: str) -> str:
        return os.path.join(self.out, PLOT_DIR, name)

    @contextmanager
    def stage(self, name: str):
        logging.info(f"Stage {name} started")
        try:
            yield
        except StageError:
            raise
        except TailDepError as e:
            logging.error(f"Stage {name} failed: {str(e)}")
            raise StageError(name, e) from e
        except OSError as e:
            logging.error(f"Stage {name} failed: {str(e)}")
            raise StageError(name, DataIOError(str(e))) from e
        logging.info(f"Stage {name} finished")

    def _write_csv(self, frame: pd.DataFrame, path: str, index: bool = False) -> None:
        frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, na_rep='', lineterminator='\n')

    def _write_json(self, data: Dict[str, Any], path: str) -> None:
        with open(path, 'w') as handle:
            json.dump(data, handle, indent=1)

    def _read_json(self, name: str, missing_message: str) -> Dict[str, Any]:
        path = self.path(name)
        if not os.path.exists(path):
            raise DataIOError(missing_message)
        try:
            with open(path) as handle:
                return json.load(handle)
        except json.JSONDecodeError as e:
            raise DataIOError(f"cannot read {path}: {str(e)}")

    def _returns_panel(self) -> ReturnPanel:
        return market_data_service.read_panel(self.path(RETURNS_FILE), "missing return panel: run ingest first")

    def _margins(self):
        return margin_service.margins_from_dict(
            self._read_json(MARGINS_FILE, "missing marginal fits: run fit-gpd first"))

    def _cmev_fits(self):
        return self.cmev.ht_fits_from_dict(
            self._read_json(CMEV_FILE, "missing conditional extremes fits: run fit-cmev first"))

    def _pp_fits(self):
        return self.pp.pp_fits_from_dict(self._read_json(PP_FILE, "missing point-process fits: run fit-pp first"))

    def ingest(self) -> ReturnPanel:
        """Prices to aligned log returns, plus the exploratory tables"""
        config = self.config
        with self.stage("ingest"):
            if config.input_path:
                series = market_data_service.load_prices(config.input_path, config.delimiter)
            else:
                logging.info(f"No input file configured, using the bundled demo panel with seed {config.seed}")
                series = simulation_service.demo_prices(config.seed)
                market_data_service.write_prices(series, self.path("demo_prices.csv"))
            panel = market_data_service.align(
                [market_data_service.log_returns(s, config.return_scale) for s in series])
            market_data_service.write_panel(panel, self.path(RETURNS_FILE), "returns")

            prices = pd.concat([pd.Series(s.prices, index=pd.DatetimeIndex(s.dates), name=s.market_id)
                                for s in series], axis=1)
            prices.index.name = 'date'
            prices.to_csv(self.plot_path("prices.csv"), float_format='%.6f', date_format='%Y-%m-%d',
                          lineterminator='\n')
            for name, frame in market_data_service.pairwise_scatter(panel).items():
                self._write_csv(frame, self.plot_path(f"scatter_{name}.csv"))
            self._write_csv(market_data_service.descriptive_statistics(panel), self.path("descriptive_statistics.csv"))
            self._write_csv(market_data_service.correlation_matrix(panel), self.path("correlation.csv"), index=True)
        return panel

    def fit_gpd(self):
        """Quantile-grid GPD fits, the chosen tail per market and the Laplace and Fréchet panels"""
        config = self.config
        with self.stage("fit-gpd"):
            panel = self._returns_panel()

            def fit_market(market_id):
                sample = panel.column(market_id)
                level = config.marginal_level(market_id)
                results = self.gpd.fit_gpd_grid(sample, config.marginal_grid, seed=config.seed)
                chosen = next((r['fit'] for r in results if r['success'] and abs(r['level'] - level) < 1e-12), None)
                return results, chosen or self.gpd.fit_gpd(sample, level, seed=config.seed)

            outcomes = run_parallel(fit_market, panel.market_ids)
            grid = pd.concat([self.gpd.grid_table(m, results) for m, (results, _) in zip(panel.market_ids, outcomes)])
            self._write_csv(grid, self.path("gpd_grid.csv"))

            margins = {}
            selected = []
            for market_id, (_, fit) in zip(panel.market_ids, outcomes):
                sample = panel.column(market_id)
                margins[market_id] = margin_service.build_margin(sample, fit.quantile_level, MarginScale.LAPLACE,
                                                                 gpd=fit)
                bundle = self.gpd.gpd_diagnostics(fit, sample, config.histogram_bins, config.observations_per_year)
                self.gpd.write_diagnostics(bundle, os.path.join(self.out, PLOT_DIR), f"gpd_{market_id}")
                selected.append({'market': market_id, 'level': f"{fit.quantile_level:.2f}",
                                 'threshold': f"{fit.threshold:.4f}", 'sigma': format_estimate(fit.sigma, fit.se_sigma),
                                 'xi': format_estimate(fit.xi, fit.se_xi), 'n_exceed': fit.n_exceed,
                                 'flags': ";".join(fit.flags)})
            self._write_csv(pd.DataFrame(selected), self.path("gpd_selected.csv"))
            self._write_json(margin_service.margins_to_dict(margins), self.path(MARGINS_FILE))

            for scale, name in ((MarginScale.LAPLACE, LAPLACE_FILE), (MarginScale.FRECHET, FRECHET_FILE)):
                market_data_service.write_panel(margin_service.transform_panel(panel, margins, scale), self.path(name))
        return margins

    def thresholds(self) -> pd.DataFrame:
        """Advisory mixture-model thresholds; a market that cannot be fitted is reported, not fatal"""
        config = self.config
        with self.stage("thresholds"):
            panel = self._returns_panel()
            rows = []
            for market_id in panel.market_ids:
                for mode in TailMode:
                    try:
                        fit = threshold_service.fit_mixture(panel.column(market_id), mode, seed=config.seed)
                    except TailDepError as e:
                        logging.warning(f"Mixture fit for {market_id} ({mode.value}) failed: {str(e)}")
                        rows.append({'market': market_id, 'tail_mode': mode.value, 'error': str(e)})
                        continue
                    rows.append({**threshold_service.summary_row(market_id, fit), 'error': ''})
                    self._write_csv(threshold_service.profile_trace(fit),
                                    self.plot_path(f"profile_{market_id}_{mode.value}.csv"))
            table = pd.DataFrame(rows)
            self._write_csv(table, self.path("thresholds.csv"))
        return table

    def fit_cmev(self):
        config = self.config
        with self.stage("fit-cmev"):
            laplace = market_data_service.read_panel(self.path(LAPLACE_FILE), "missing Laplace panel")
            fits = self.cmev.fit_all(laplace, config.dependence_quantile, seed=config.seed)
            self._write_json(self.cmev.ht_fits_to_dict(fits), self.path(CMEV_FILE))
            self._write_csv(self.cmev.parameter_frame(fits), self.path("cmev_parameters.csv"))

            rows = []
            for conditioning, fit in fits.items():
                for name in ('a', 'b'):
                    row = {'conditioning': conditioning, 'parameter': name}
                    row.update({m: (f"{getattr(fit.params[m], name):.4f}" if m in fit.params else "")
                                for m in laplace.market_ids})
                    rows.append(row)
            self._write_csv(pd.DataFrame(rows), self.path("cmev_table.csv"))

            searches = [self.cmev.dependence_quantile_search(laplace, m, config.dependence_grid, seed=config.seed)
                        for m in laplace.market_ids]
            self._write_csv(pd.concat(searches, ignore_index=True), self.path("dependence_search.csv"))

            for conditioning, fit in fits.items():
                for target, layers in self.cmev.ht_diagnostics(fit).items():
                    for layer, frame in layers.items():
                        self._write_csv(frame, self.plot_path(f"ht_{conditioning}_{target}_{layer}.csv"))
        return fits

    def predict(self):
        config = self.config
        with self.stage("predict"):
            fits = self._cmev_fits()
            margins = self._margins()
            markets = list(fits)
            results = {}
            quantile_rows = []
            searches = []
            for stream, (conditioning, fit) in enumerate(fits.items()):
                result = self.cmev.predict_exceedance_prob(
                    fit, margins, config.prediction_quantile, config.n_importance, config.seed,
                    target_quantile=config.target_quantile, stream=stream)
                results[conditioning] = result
                for target, levels in result.conditional_quantiles.items():
                    quantile_rows.append({'conditioning': conditioning, 'target': target, **levels})
                searches.append(self.cmev.prediction_quantile_search(
                    fit, config.prediction_grid, config.n_importance, config.seed, config.target_quantile))
                sample = self.cmev.importance_sample(fit, config.prediction_quantile,
                                                     min(config.n_importance, PLOT_SAMPLE_ROWS), config.seed,
                                                     margins, stream=stream)
                self._write_csv(sample, self.plot_path(f"importance_{conditioning}.csv"))

            values = {(c, t): p for c, r in results.items() for t, p in r.probabilities.items()}
            self._write_csv(market_grid(markets, markets, values), self.path("predictions.csv"), index=True)
            self._write_csv(pd.DataFrame(quantile_rows), self.path("conditional_quantiles.csv"))
            self._write_csv(pd.concat(searches, ignore_index=True), self.path("prediction_search.csv"))
        return results

    def fit_pp(self):
        config = self.config
        with self.stage("fit-pp"):
            frechet = market_data_service.read_panel(self.path(FRECHET_FILE), "missing Fréchet panel")
            selections = self.pp.select_panel(frechet, config.pp_quantile, seed=config.seed)
            self._write_json(self.pp.pp_fits_to_dict(selections), self.path(PP_FILE))
            tables = [self.pp.pair_table(s).assign(pair=key) for key, s in selections.items()]
            table = pd.concat(tables, ignore_index=True)[['pair', 'family', 'alpha', 'beta', 'aic']]
            self._write_csv(table, self.path("pp_table.csv"))
            self._write_csv(self.pp.selection_summary(selections), self.path("family_selection.csv"))
            rows = []
            for key, selection in selections.items():
                try:
                    bundle = self.pp.pp_diagnostics(selection.best, config.histogram_bins)
                except TailDepError as e:
                    logging.warning(f"No angular diagnostics for {key}: {str(e)}")
                    continue
                for name, frame in bundle.items():
                    self._write_csv(frame, self.plot_path(f"pp_{key}_{name}.csv"))
                rows.append(self.pp.diagnostics_row(key, selection.best, bundle))
            self._write_csv(pd.DataFrame(rows, columns=['pair', 'family', 'n_points', 'max_pp_deviation']),
                            self.path(PP_DIAGNOSTICS_FILE))

        return selections

    def compare(self):
        with self.stage("compare"):
            fits = self._cmev_fits()
            selections = self._pp_fits()
            cmev_labels = self.cmev.pair_labels(fits, list(fits))
            pp_labels = {key: self.pp.classify_pp_strength(s.best) for key, s in selections.items()}
            comparison = self.pp.compare_models(cmev_labels, pp_labels)
            self._write_csv(self.pp.comparison_table(comparison), self.path("comparison.csv"))
            self._write_csv(pd.DataFrame(comparison.panels, columns=['cmev', 'point_process', 'count']),
                            self.path("comparison_panels.csv"))
            logging.info(f"Model comparison: {comparison.agree} agree, {comparison.near} near, "
                         f"{comparison.disagree} disagree")
        return comparison

    def _table_section(self, title: str, name: str, stage: str) -> str:
        path = self.path(name)
        if not os.path.exists(path):
            raise DataIOError(f"missing {name}: run {stage} first")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        return f"## {title}\n\n{markdown_table(frame)}\n"

    def report(self) -> Dict[str, Any]:
        """report.md, the plotting stub and the manifest hashing every output file"""
        config = self.config
        with self.stage("report"):
            sections = [
                "# Extremal dependence report\n",
                f"Seed {config.seed}, dependence quantile {config.dependence_quantile:g}, "
                f"prediction quantile {config.prediction_quantile:g}, "
                f"point-process quantile {config.pp_quantile:g}.\n",
                self._table_section("Descriptive statistics", "descriptive_statistics.csv", "ingest"),
                self._table_section("Selected marginal GPD fits", "gpd_selected.csv", "fit-gpd"),
                self._table_section("Mixture-model thresholds", "thresholds.csv", "thresholds"),
                self._table_section("Conditional extremes parameters", "cmev_table.csv", "fit-cmev"),
                self._table_section("Predicted conditional probability of threshold exceedance",
                                    "predictions.csv", "predict"),
                self._table_section("Point-process dependence estimates", "pp_table.csv", "fit-pp"),
                self._table_section("Family selection", "family_selection.csv", "fit-pp"),
                self._table_section("Point-process angular fit", PP_DIAGNOSTICS_FILE, "fit-pp"),
                self._table_section("Conditional extremes and point-process comparison", "comparison.csv",
                                    "compare"),
                self._table_section("Comparison panels", "comparison_panels.csv", "compare"),
            ]
            with open(self.path(REPORT_FILE), 'w') as handle:
                handle.write("\n".join(sections))
            with open(self.path(PLOT_SCRIPT), 'w') as handle:
                handle.write(PLOT_SCRIPT_TEXT)
            manifest = self.write_manifest()
        return manifest

    def write_manifest(self) -> Dict[str, Any]:
        files = {}
        for root, _, names in os.walk(self.out):
            for name in names:
                path = os.path.join(root, name)
                relative = os.path.relpath(path, self.out).replace(os.sep, '/')
                if relative != MANIFEST_FILE and not relative.endswith('.png'):
                    files[relative] = file_hash(path)
        manifest = {
            'seed': self.config.seed,
            'config_sha256': config_hash(self.config),
            'files': dict(sorted(files.items())),
        }
        self._write_json(manifest, self.path(MANIFEST_FILE))
        return manifest

    def run_stage(self, name: str):
        handlers = {
            "ingest": self.ingest, "fit-gpd": self.fit_gpd, "thresholds": self.thresholds,
            "fit-cmev": self.fit_cmev, "predict": self.predict, "fit-pp": self.fit_pp,
            "compare": self.compare, "report": self.report,
        }
        if name not in handlers:
            raise DataValidationError(f"unknown stage '{name}'")
        return handlers[name]()

    def run_pipeline(self, stages: Optional[List[str]] = None) -> Dict[str, Any]:
        """Run the stages in order; a failure stops the run and leaves earlier outputs in place"""
        stages = stages or self.STAGES
        for name in stages:
            self.run_stage(name)
        manifest = self.write_manifest() if "report" not in stages else self._read_json(MANIFEST_FILE, "")
        logging.info(f"Pipeline finished: {len(manifest['files'])} files in {self.out}")
        return {'output_dir': self.out, 'report': self.path(REPORT_FILE), 'manifest': manifest}


def run_pipeline(config: PipelineConfig) -> Dict[str, Any]:
    return PipelineService(config).run_pipeline()
