"""Readers and writers for every file the command line touches.

Tables are whitespace separated in a fixed column order and lines
starting with `#` are skipped. Scenario, observation and parameter files
are INI files: table sections hold one row per line and `[parameters]`
holds `key = value` pairs. Every CSV is written with
twelve significant digits so golden files stay byte-stable.
"""

import configparser
import logging
import pathlib

import numpy as np
import pandas as pd

from typing import Dict
from typing import List
from typing import Union

from demandforge.choice import MODE_LEVELS
from demandforge.choice import ModeTree
from demandforge.choice import PAIR_LEVELS
from demandforge.errors import InputError
from demandforge.estimation import SyntheticScenario
from demandforge.network import LINK_COLUMNS
from demandforge.network import ModalNetwork
from demandforge.network import ZonalSystem
from demandforge.programs import ObservationBundle
from demandforge.routes import RouteSet
from demandforge.solver import DualSolution
from demandforge.solver import KKTReport
from demandforge.solver import SolutionState

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.12g'
PathLike = Union[str, pathlib.Path]


def _existing(path: PathLike) -> pathlib.Path:

    path = pathlib.Path(path)

    if not path.is_file():
        raise InputError("The file {path} does not exist.".format(path=path))

    return path


def _read_table(path: PathLike, layouts: List[List[str]]) -> pd.DataFrame:
    """Reads a whitespace table with a fixed column order.

    Overview:
    ----
    Lines starting with `#` are skipped, so a `# zone O D` header is
    ignored. A bare header repeating the column names is dropped as well.
    When more than one layout is allowed the number of columns picks it.

    Arguments:
    ----
    path {PathLike} -- The table.

    layouts {List[List[str]]} -- The allowed column orders.

    Raises:
    ----
    InputError: If the file is missing, empty or its rows do not fit a layout.

    Returns:
    ----
    {pd.DataFrame} -- The rows as strings, named by the matching layout.
    """

    path = _existing(path)

    try:
        frame = pd.read_csv(path, sep=r'\s+', header=None, comment='#', dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as error:
        raise InputError("The file {path} could not be parsed: {error}".format(path=path, error=error))

    columns = next((layout for layout in layouts if len(layout) == frame.shape[1]), None)

    if columns is None:
        raise InputError(
            "The file {path} has {n} columns, expected the layout {layouts}.".format(
                path=path,
                n=frame.shape[1],
                layouts=' or '.join('`{}`'.format(' '.join(layout)) for layout in layouts)
            )
        )

    frame.columns = columns

    if len(frame) and list(frame.iloc[0]) == columns:
        frame = frame.iloc[1:].reset_index(drop=True)

    if frame.isna().any().any():
        raise InputError("The file {path} has rows with missing fields.".format(path=path))

    if frame.empty:
        raise InputError("The file {path} holds no rows.".format(path=path))

    return frame


def _numeric(frame: pd.DataFrame, columns: List[str], source: str) -> pd.DataFrame:

    frame = frame.copy()

    for column in columns:
        try:
            frame[column] = frame[column].astype(float)
        except ValueError:
            raise InputError(
                "Column `{column}` of {source} holds non-numeric values.".format(column=column, source=source)
            )

    return frame


def read_zones(path: PathLike) -> ZonalSystem:
    """Reads a `zone O D` table."""

    frame = _read_table(path=path, layouts=[['zone', 'O', 'D']])
    return ZonalSystem(data=_numeric(frame, ['O', 'D'], str(path)))


def read_links(path: PathLike, value_of_time: float = 1.0, mode_value_of_time: Dict[str, float] = None) -> ModalNetwork:
    """Reads a `mode tail head length t0 capacity alpha beta cost` table."""

    frame = _read_table(path=path, layouts=[LINK_COLUMNS])
    frame = _numeric(frame, LINK_COLUMNS[3:], str(path))

    return ModalNetwork(links=frame, value_of_time=value_of_time, mode_value_of_time=mode_value_of_time)


def read_od_costs(path: PathLike) -> pd.DataFrame:
    """Reads an `i j mode cost` table into `origin destination mode cost` columns.

    Overview:
    ----
    The `mode` column is optional; without it every row belongs to the mode
    `all`. Pairs missing from the file are unavailable.
    """

    frame = _read_table(path=path, layouts=[['i', 'j', 'mode', 'cost'], ['i', 'j', 'cost']])

    if 'mode' not in frame.columns:
        frame['mode'] = 'all'

    frame = _numeric(frame, ['cost'], str(path)).rename(columns={'i': 'origin', 'j': 'destination'})

    return frame[['origin', 'destination', 'mode', 'cost']]


def read_link_counts(path: PathLike) -> pd.Series:
    """Reads a `mode tail head flow` table into a series indexed by link."""

    frame = _numeric(_read_table(path=path, layouts=[['mode', 'tail', 'head', 'flow']]), ['flow'], str(path))
    return frame.set_index(['mode', 'tail', 'head'])['flow']


def read_route_set(path: PathLike, network: ModalNetwork) -> RouteSet:
    """Reads one route per line, `i j mode n1>n2>...`."""

    frame = _read_table(path=path, layouts=[['i', 'j', 'mode', 'route']])
    route_set = RouteSet(network=network)

    route_set.add_routes(
        routes=[
            {'origin': row.i, 'destination': row.j, 'mode': row.mode, 'nodes': row.route.split('>')}
            for row in frame.itertuples(index=False)
        ]
    )

    return route_set


def write_route_set(route_set: RouteSet, path: PathLike) -> None:

    rows = [
        {'i': route.origin, 'j': route.destination, 'mode': route.mode, 'route': route.label}
        for routes in route_set.routes.values()
        for route in routes
    ]

    with open(file=path, mode='w') as route_file:
        route_file.write('# i j mode route\n')
        pd.DataFrame(rows, columns=['i', 'j', 'mode', 'route']).to_csv(route_file, sep=' ', index=False, header=False)


def _parser(path: PathLike) -> configparser.ConfigParser:
    """An INI parser whose table rows are keys without values."""

    path = _existing(path)
    parser = configparser.ConfigParser(
        allow_no_value=True,
        delimiters=('=',),
        comment_prefixes=('#', ';'),
        interpolation=None
    )
    parser.optionxform = str

    try:
        parser.read(path)
    except configparser.Error as error:
        raise InputError("The file {path} could not be parsed: {error}".format(path=path, error=error))

    return parser


def _section_table(parser: configparser.ConfigParser, section: str, columns: List[str], source: str,
                   required: bool = True) -> pd.DataFrame:

    if not parser.has_section(section):
        if required:
            raise InputError("{source} has no [{section}] section.".format(source=source, section=section))
        return pd.DataFrame(columns=columns)

    rows = [line.split() for line in parser[section]]

    if not rows or rows[0] != columns:
        raise InputError(
            "Section [{section}] of {source} must start with the header `{header}`.".format(
                section=section,
                source=source,
                header=' '.join(columns)
            )
        )

    for row in rows[1:]:
        if len(row) != len(columns):
            raise InputError(
                "Section [{section}] of {source} has a malformed row: {row}".format(
                    section=section,
                    source=source,
                    row=' '.join(row)
                )
            )

    return pd.DataFrame(rows[1:], columns=columns)


def _parameter(parameters: configparser.SectionProxy, key: str, source: str, default: float = None) -> float:

    if key not in parameters:
        if default is None:
            raise InputError("{source} is missing the parameter `{key}`.".format(source=source, key=key))
        return default

    try:
        return float(parameters[key])
    except (TypeError, ValueError):
        raise InputError("Parameter `{key}` of {source} is not a number.".format(key=key, source=source))


def _prefixed(parameters: configparser.SectionProxy, prefix: str, source: str) -> Dict[str, float]:

    return {
        key[len(prefix):]: _parameter(parameters, key, source)
        for key in parameters
        if key.startswith(prefix)
    }


def _wide(rows: pd.DataFrame, keys: List[str], names: List[str]) -> pd.DataFrame:

    if rows.empty:
        return pd.DataFrame(index=pd.MultiIndex.from_tuples([], names=names))

    wide = rows.pivot_table(index=keys, columns='name', values='value', aggfunc='first')

    return wide.rename_axis(index=names, columns=None)


def _attribute_tables(frame: pd.DataFrame, tree: ModeTree, zones: ZonalSystem, source: str) -> Dict[str, pd.DataFrame]:
    """Pivots the long attribute rows into destination and mode tables.

    Overview:
    ----
    Pairs come from the destination rows, else from the mode rows, else from
    every origin-destination pair of the zones. Mode tables cover every pair
    and mode of the tree.
    """

    frame = _numeric(frame, ['value'], source)
    unknown = set(frame['level']).difference(['k', 'q'])

    if unknown:
        raise InputError("Attribute levels must be `k` or `q`, got {levels}.".format(levels=sorted(unknown)))

    dest = _wide(frame[frame['level'] == 'k'], ['i', 'j'], PAIR_LEVELS)
    mode = _wide(frame[frame['level'] == 'q'], ['i', 'j', 'mode'], MODE_LEVELS)

    if len(dest.index):
        pairs = dest.index
    elif len(mode.index):
        pairs = mode.index.droplevel('mode').unique()
    else:
        pairs = pd.MultiIndex.from_tuples(zones.od_pairs(), names=PAIR_LEVELS)

    expected = pd.MultiIndex.from_tuples(
        [(origin, destination, name) for origin, destination in pairs for name in tree.modes],
        names=MODE_LEVELS
    )

    return {'dest': dest.reindex(pairs), 'mode': mode.reindex(expected)}


def read_scenario(path: PathLike) -> SyntheticScenario:
    """Reads a scenario file.

    Overview:
    ----
    Sections `[zones]` (`zone O D`), `[links]` (the link table),
    `[nests]` (`nest tau modes`, modes comma separated), `[attributes]`
    (`level name i j mode value`, level `k` with mode `-` for destination
    attributes, level `q` for mode attributes) and `[parameters]` with
    `theta_j`, `theta_m`, `theta_r`, `value_of_time`, `k_routes`,
    `vot.<mode>` and `beta.<attribute>`.

    Arguments:
    ----
    path {PathLike} -- The scenario file.

    Raises:
    ----
    InputError: If a section, header or parameter is missing or malformed.

    Returns:
    ----
    {SyntheticScenario} -- The scenario.
    """

    source = str(path)
    parser = _parser(path)

    if not parser.has_section('parameters'):
        raise InputError("{source} has no [parameters] section.".format(source=source))

    parameters = parser['parameters']

    zones = _numeric(_section_table(parser, 'zones', ['zone', 'O', 'D'], source), ['O', 'D'], source)
    links = _numeric(_section_table(parser, 'links', LINK_COLUMNS, source), LINK_COLUMNS[3:], source)
    nests = _section_table(parser, 'nests', ['nest', 'tau', 'modes'], source)
    attributes = _section_table(parser, 'attributes', ['level', 'name', 'i', 'j', 'mode', 'value'], source)

    network = ModalNetwork(
        links=links,
        value_of_time=_parameter(parameters, 'value_of_time', source, default=1.0),
        mode_value_of_time=_prefixed(parameters, 'vot.', source)
    )

    nests = _numeric(nests, ['tau'], source)
    tree = ModeTree(
        nests={row.nest: row.modes.split(',') for row in nests.itertuples(index=False)},
        tau={row.nest: row.tau for row in nests.itertuples(index=False)},
        theta_j=_parameter(parameters, 'theta_j', source),
        theta_m=_parameter(parameters, 'theta_m', source),
        theta_r=_parameter(parameters, 'theta_r', source)
    )

    tables = _attribute_tables(frame=attributes, tree=tree, zones=ZonalSystem(data=zones), source=source)
    beta = _prefixed(parameters, 'beta.', source)

    dest = tables['dest']
    mode = tables['mode']

    return SyntheticScenario(
        zones=ZonalSystem(data=zones),
        network=network,
        tree=tree,
        dest_attributes=dest,
        mode_attributes=mode,
        beta_k={name: beta.get(name, 0.0) for name in dest.columns},
        beta_q={name: beta.get(name, 0.0) for name in mode.columns},
        k_routes=int(_parameter(parameters, 'k_routes', source, default=5))
    )


def read_observations(path: PathLike, scenario: SyntheticScenario) -> ObservationBundle:
    """Reads an observation file, attributes taken from the scenario.

    Overview:
    ----
    Sections `[origins]` (`zone O`), `[trips_ij]` (`i j T`), `[trips_ijm]`
    (`i j mode T`) and optionally `[trips_ijM]` (`i j nest T`) and
    `[link_counts]` (`mode tail head flow`).
    """

    source = str(path)
    parser = _parser(path)

    def series(section: str, keys: List[str], names: List[str], value: str = 'T', required: bool = True) -> pd.Series:

        if not required and not parser.has_section(section):
            return None

        table = _numeric(_section_table(parser, section, keys + [value], source), [value], source)
        return table.set_index(keys)[value].rename_axis(names)

    origins = _numeric(_section_table(parser, 'origins', ['zone', 'O'], source), ['O'], source)

    return ObservationBundle(
        origins=origins.set_index('zone')['O'].rename_axis('origin'),
        trips_ij=series('trips_ij', ['i', 'j'], PAIR_LEVELS),
        trips_ijM=series('trips_ijM', ['i', 'j', 'nest'], ['origin', 'destination', 'nest'], required=False),
        trips_ijm=series('trips_ijm', ['i', 'j', 'mode'], MODE_LEVELS),
        link_counts=series('link_counts', ['mode', 'tail', 'head'], ['mode', 'tail', 'head'], 'flow', required=False),
        dest_attributes=scenario.dest_attributes,
        mode_attributes=scenario.mode_attributes
    )


def _table_lines(frame: pd.DataFrame) -> List[str]:

    lines = [' '.join(frame.columns)]

    for row in frame.itertuples(index=False):
        lines.append(' '.join(FLOAT_FORMAT % value if isinstance(value, float) else str(value) for value in row))

    return lines


def write_observations(bundle: ObservationBundle, path: PathLike) -> None:
    """Writes a bundle in the observation file layout."""

    sections = {
        'origins': bundle.origins.rename('O').rename_axis('zone').reset_index(),
        'trips_ij': bundle.trips_ij.rename('T').rename_axis(['i', 'j']).reset_index(),
        'trips_ijm': bundle.trips_ijm.rename('T').rename_axis(['i', 'j', 'mode']).reset_index()
    }

    if bundle.trips_ijM is not None:
        sections['trips_ijM'] = bundle.trips_ijM.rename('T').rename_axis(['i', 'j', 'nest']).reset_index()

    if bundle.link_counts is not None:
        sections['link_counts'] = bundle.link_counts.rename('flow').rename_axis(['mode', 'tail', 'head']).reset_index()

    lines = []
    for name, frame in sections.items():
        lines.append('[{name}]'.format(name=name))
        lines.extend(_table_lines(frame))
        lines.append('')

    pathlib.Path(path).write_text('\n'.join(lines))


def write_parameters(duals: DualSolution, path: PathLike, converged: bool = True, max_residual: float = None) -> None:
    """Writes recovered parameters as an INI file.

    Overview:
    ----
    `[parameters]` holds `theta_j`, `theta_m`, `theta_r`, `tau.<nest>`,
    `beta.<attribute>` and `asc.<alternative>`; `[status]` holds `state`,
    `converged` or `nonconverged`, and the largest constraint residual.
    """

    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser['parameters'] = {}
    section = parser['parameters']

    for name in ['theta_j', 'theta_m', 'theta_r', 'theta']:
        if getattr(duals, name) is not None:
            section[name] = FLOAT_FORMAT % getattr(duals, name)

    for prefix, table in [('tau', duals.tau), ('beta', {**duals.beta_k, **duals.beta_q}), ('asc', duals.asc)]:
        for key, value in table.items():
            section['{prefix}.{key}'.format(prefix=prefix, key=key)] = FLOAT_FORMAT % value

    parser['status'] = {'state': 'converged' if converged else 'nonconverged'}

    if max_residual is not None:
        parser['status']['max_residual'] = FLOAT_FORMAT % max_residual

    with open(path, mode='w+') as parameter_file:
        parser.write(parameter_file)


def read_parameters(path: PathLike, tree: ModeTree, beta_names: List[str]) -> Dict:
    """Reads a parameter file written by `write_parameters`.

    Arguments:
    ----
    path {PathLike} -- The parameter file.

    tree {ModeTree} -- Supplies the nests whose `tau` must be present.

    beta_names {List[str]} -- Attributes whose `beta` must be present.

    Raises:
    ----
    InputError: If a field is missing.

    Returns:
    ----
    {Dict} -- `theta_j`, `theta_m`, `theta_r`, `tau`, `beta` and `converged`.
    """

    source = str(path)
    parser = _parser(path)

    if not parser.has_section('parameters'):
        raise InputError("{source} has no [parameters] section.".format(source=source))

    section = parser['parameters']

    values = {
        'theta_j': _parameter(section, 'theta_j', source),
        'theta_m': _parameter(section, 'theta_m', source),
        'theta_r': _parameter(section, 'theta_r', source),
        'tau': {nest: _parameter(section, 'tau.{nest}'.format(nest=nest), source) for nest in tree.nest_names},
        'beta': {name: _parameter(section, 'beta.{name}'.format(name=name), source) for name in beta_names},
        'converged': parser.get('status', 'state', fallback='converged') == 'converged'
    }

    return values


def write_csv(frame: pd.DataFrame, path: PathLike) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_trip_matrix(trips: pd.Series, path: PathLike) -> None:
    """Writes `i,j,T` rows."""

    write_csv(trips.rename('T').rename_axis(['i', 'j']).reset_index(), path)


def write_solution_tables(state: SolutionState, directory: PathLike, route_set: RouteSet = None) -> List[pathlib.Path]:
    """Writes the trip tables and link flows of a solved hierarchical program.

    Returns:
    ----
    {List[pathlib.Path]} -- The files written: `trips_ij.csv`, `trips_ijm.csv`,
        `trips_ijmr.csv` and `link_flows.csv` where available.
    """

    directory = pathlib.Path(directory)
    written = []

    layouts = {
        'destination': ('trips_ij.csv', ['i', 'j']),
        'mode': ('trips_ijm.csv', ['i', 'j', 'mode']),
        'route': ('trips_ijmr.csv', ['i', 'j', 'mode', 'route'])
    }

    for level, (name, columns) in layouts.items():

        if level not in state.trips:
            continue

        frame = state.trips[level].rename('T').rename_axis(columns).reset_index()

        if level == 'route' and route_set is not None:
            frame.insert(4, 'nodes', route_set.frame['nodes'].reindex(state.trips[level].index).to_numpy())

        write_csv(frame, directory.joinpath(name))
        written.append(directory.joinpath(name))

    if state.link_flows is not None:
        write_csv(state.link_flows.series.reset_index(), directory.joinpath('link_flows.csv'))
        written.append(directory.joinpath('link_flows.csv'))

    return written


def write_solution(state: SolutionState, path: PathLike) -> None:
    """Saves the variable vector with its level and key, in program order."""

    rows = []

    for level, values in state.probabilities.items():
        for key, value in values.items():
            label = '|'.join(str(part) for part in key) if isinstance(key, tuple) else str(key)
            rows.append({'position': len(rows), 'level': level, 'key': label, 'value': value})

    write_csv(pd.DataFrame(rows, columns=['position', 'level', 'key', 'value']), path)


def read_solution(path: PathLike) -> np.ndarray:
    """Loads a vector saved by `write_solution`."""

    frame = pd.read_csv(_existing(path))

    if list(frame.columns) != ['position', 'level', 'key', 'value']:
        raise InputError("{path} is not a saved solution.".format(path=path))

    return frame.sort_values('position')['value'].to_numpy(dtype=float)


def write_kkt_report(report: KKTReport, path: PathLike) -> None:
    write_csv(report.to_frame(), path)


def write_summary(values: Dict[str, Dict[str, object]], path: PathLike) -> None:
    """Writes a run summary as an INI file, one section per group of values."""

    parser = configparser.ConfigParser()
    parser.optionxform = str

    for section, entries in values.items():
        parser[section] = {
            str(key): FLOAT_FORMAT % value if isinstance(value, float) else str(value)
            for key, value in entries.items()
        }

    with open(path, mode='w+') as summary_file:
        parser.write(summary_file)
