import io
import logging
import os
from functools import reduce
from itertools import combinations
from typing import Dict, List, Optional, TextIO, Union

import numpy as np
import pandas as pd
from scipy import stats

from exceptions import DataIOError, DataValidationError
from models import PriceSeries, ReturnPanel, ReturnSeries

SCALE_TAG_PREFIX = "# scale:"


class MarketDataService:
    def __init__(self, delimiter: str = ","):
        self.delimiter = delimiter

    def load_prices(self, source: Union[str, TextIO], delimiter: Optional[str] = None) -> List[PriceSeries]:
        """
        Parse a delimited price file: a date column plus one column per market.
        Rows with unparsable dates are dropped; empty cells drop only that market's row.
        """
        sep = delimiter or self.delimiter
        try:
            frame = pd.read_csv(source, sep=sep, comment='#', skipinitialspace=True,
                                float_precision='round_trip')
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataIOError(f"cannot read price file: {e}")

        columns = [str(c).strip() for c in frame.columns]
        frame.columns = columns
        date_column = next((c for c in columns if c.lower() == 'date'), None)
        if date_column is None or len(columns) < 2 or any(c == '' or c.startswith('Unnamed') for c in columns):
            raise DataIOError(f"malformed header: expected a 'date' column and market columns, got {columns}")

        dates = pd.to_datetime(frame[date_column], errors='coerce', format='ISO8601')
        bad_dates = dates.isna()
        if bad_dates.any():
            logging.warning(f"Rejected {int(bad_dates.sum())} rows with unparsable dates")
        frame = frame.loc[~bad_dates]
        dates = dates.loc[~bad_dates]

        series = []
        for market_id in (c for c in columns if c != date_column):
            prices = pd.to_numeric(frame[market_id], errors='coerce')
            present = prices.notna()
            if not present.any():
                raise DataValidationError(f"empty series for market {market_id}")
            values = prices[present].to_numpy(dtype=float)
            if np.any(values <= 0):
                raise DataValidationError(f"non-positive price in market {market_id}")
            series.append(PriceSeries(
                market_id=market_id,
                dates=dates[present].to_numpy().astype('datetime64[D]'),
                prices=values,
            ))
            logging.info(f"Loaded {len(values)} prices for {market_id}")
        return series

    def write_prices(self, series: List[PriceSeries], path: str) -> None:
        """Write price series in the same layout load_prices reads"""
        frame = pd.concat(
            [pd.Series(s.prices, index=pd.DatetimeIndex(s.dates), name=s.market_id) for s in series],
            axis=1, join='outer',
        )
        frame.index.name = 'date'
        frame.to_csv(path, sep=self.delimiter, float_format='%.17g', date_format='%Y-%m-%d')

    def log_returns(self, s: PriceSeries, scale: float = 1.0) -> ReturnSeries:
        """r_t = ln(P_t / P_{t-1}), optionally multiplied by a scale factor"""
        if len(s.prices) < 2:
            raise DataValidationError(f"need at least 2 prices for returns, {s.market_id} has {len(s.prices)}")
        returns = np.log(s.prices[1:] / s.prices[:-1]) * scale
        return ReturnSeries(market_id=s.market_id, dates=s.dates[1:], returns=returns)

    def align(self, series: List[ReturnSeries]) -> ReturnPanel:
        """Inner join on dates; column order follows input order"""
        if len(series) < 2:
            raise DataValidationError("align needs at least 2 series")
        for s in series:
            if len(np.unique(s.dates)) != len(s.dates):
                raise DataValidationError(f"duplicate dates in series {s.market_id}")
        common = reduce(np.intersect1d, [s.dates for s in series])
        if len(common) == 0:
            raise DataValidationError("empty intersection of dates")

        columns = []
        for s in series:
            order = np.argsort(s.dates)
            positions = np.searchsorted(s.dates[order], common)
            columns.append(s.returns[order][positions])

        dropped = max(len(s.dates) for s in series) - len(common)
        if dropped:
            logging.info(f"Alignment kept {len(common)} common dates, dropped up to {dropped} per market")
        return ReturnPanel(
            market_ids=[s.market_id for s in series],
            dates=common,
            returns=np.column_stack(columns),
        )

    def write_panel(self, panel: ReturnPanel, path: str, scale_tag: Optional[str] = None) -> None:
        """Persist a panel; the scale tag goes on a leading comment line"""
        tag = scale_tag or panel.scale
        frame = pd.DataFrame(panel.returns, columns=panel.market_ids,
                             index=pd.DatetimeIndex(panel.dates, name='date'))
        buffer = io.StringIO()
        if tag:
            buffer.write(f"{SCALE_TAG_PREFIX} {tag}\n")
        frame.to_csv(buffer, sep=self.delimiter, float_format='%.17g', date_format='%Y-%m-%d')
        with open(path, 'w', newline='') as handle:
            handle.write(buffer.getvalue())

    def read_panel(self, path: str, missing_message: Optional[str] = None) -> ReturnPanel:
        if not os.path.exists(path):
            raise DataIOError(missing_message or f"missing panel file {path}")
        with open(path) as handle:
            first = handle.readline()
        scale = first[len(SCALE_TAG_PREFIX):].strip() if first.startswith(SCALE_TAG_PREFIX) else None
        try:
            frame = pd.read_csv(path, sep=self.delimiter, comment='#', index_col=0, float_precision='round_trip')
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataIOError(f"cannot read panel {path}: {e}")
        return ReturnPanel(
            market_ids=[str(c) for c in frame.columns],
            dates=pd.to_datetime(frame.index, format='ISO8601').to_numpy().astype('datetime64[D]'),
            returns=frame.to_numpy(dtype=float),
            scale=scale,
        )

    def descriptive_statistics(self, panel: ReturnPanel) -> pd.DataFrame:
        """Per-market summary of the return distributions"""
        r = panel.returns
        return pd.DataFrame({
            'market': panel.market_ids,
            'n': [panel.n_rows] * len(panel.market_ids),
            'mean': r.mean(axis=0),
            'std': r.std(axis=0, ddof=1),
            'min': r.min(axis=0),
            'max': r.max(axis=0),
            'skewness': stats.skew(r, axis=0),
            'excess_kurtosis': stats.kurtosis(r, axis=0, fisher=True),
        })

    def pairwise_scatter(self, panel: ReturnPanel) -> Dict[str, pd.DataFrame]:
        """Scatter data for every unordered market pair"""
        bundle = {}
        for i, j in combinations(range(len(panel.market_ids)), 2):
            name = f"{panel.market_ids[i]}_{panel.market_ids[j]}"
            bundle[name] = pd.DataFrame({'x': panel.returns[:, i], 'y': panel.returns[:, j]})
        return bundle

    def correlation_matrix(self, panel: ReturnPanel) -> pd.DataFrame:
        corr = np.corrcoef(panel.returns, rowvar=False)
        return pd.DataFrame(corr, index=panel.market_ids, columns=panel.market_ids)


market_data_service = MarketDataService()
