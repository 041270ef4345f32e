import dataclasses
import pathlib

from configparser import ConfigParser
from typing import Union

from demandforge.errors import InputError


@dataclasses.dataclass(frozen=True)
class SolverConfig():

    """
    Holds the tolerances, iteration caps and step rules used by
    every solver in the package.
    """

    tol_inner: float = 1e-8
    tol_outer: float = 1e-6
    max_inner_iter: int = 10000
    max_outer_iter: int = 200
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    min_step: float = 1e-10
    probability_floor: float = 1e-300
    interior_clip: float = 1e-12
    huber_width: float = 1e-3
    msa_switch: float = 1e-4
    fixed_point_tol: float = 1e-10
    max_fixed_point_iter: int = 5000
    k_routes: int = 5
    step_cap: float = 1e6
    flow_damping: float = 1.0

    def __post_init__(self) -> None:

        positive = [
            'tol_inner', 'tol_outer', 'armijo_c1', 'min_step', 'probability_floor',
            'interior_clip', 'huber_width', 'msa_switch', 'fixed_point_tol',
            'step_cap', 'flow_damping'
        ]

        for name in positive:
            if getattr(self, name) <= 0:
                raise InputError(
                    "Solver setting `{name}` must be positive, got {value}.".format(
                        name=name,
                        value=getattr(self, name)
                    )
                )

        for name in ['max_inner_iter', 'max_outer_iter', 'max_fixed_point_iter', 'k_routes']:
            if getattr(self, name) < 1:
                raise InputError(
                    "Solver setting `{name}` must be at least 1, got {value}.".format(
                        name=name,
                        value=getattr(self, name)
                    )
                )

        if not 0.0 < self.armijo_shrink < 1.0:
            raise InputError(
                "Solver setting `armijo_shrink` must lie in (0, 1), got {value}.".format(
                    value=self.armijo_shrink
                )
            )

    def replace(self, **overrides) -> 'SolverConfig':
        """Returns a copy with the given fields replaced.

        Overview:
        ----
        Fields set to `None` are ignored, which lets the command line pass
        every optional flag straight through.

        Returns:
        ----
        {SolverConfig} -- The new configuration.
        """

        overrides = {key: value for key, value in overrides.items() if value is not None}
        return dataclasses.replace(self, **overrides)

    @classmethod
    def from_ini(cls, path: Union[str, pathlib.Path], section: str = 'solver') -> 'SolverConfig':
        """Loads a configuration from an INI file.

        Arguments:
        ----
        path {Union[str, pathlib.Path]} -- The INI file.

        Keyword Arguments:
        ----
        section {str} -- The section holding the solver keys. (default: {'solver'})

        Raises:
        ----
        InputError: If the file or the section is missing, or a key is unknown.

        Returns:
        ----
        {SolverConfig} -- The configuration, defaults filled in for absent keys.

        Usage:
        ----
            >>> config = SolverConfig.from_ini(path='config/config.ini')
            >>> config.tol_inner
            1e-08
        """

        parser = ConfigParser()

        if not parser.read(str(path)):
            raise InputError("Config file {path} could not be read.".format(path=path))

        if not parser.has_section(section):
            raise InputError(
                "Config file {path} has no [{section}] section.".format(path=path, section=section)
            )

        fields = {field.name: field.type for field in dataclasses.fields(cls)}
        values = {}

        for key, raw in parser.items(section):

            if key not in fields:
                raise InputError(
                    "Unknown solver setting `{key}` in {path}.".format(key=key, path=path)
                )

            try:
                values[key] = int(raw) if fields[key] in (int, 'int') else float(raw)
            except ValueError:
                raise InputError(
                    "Solver setting `{key}` has a non-numeric value `{raw}`.".format(key=key, raw=raw)
                )

        return cls(**values)

    def to_ini(self, path: Union[str, pathlib.Path], section: str = 'solver') -> None:
        """Writes the configuration to an INI file.

        Arguments:
        ----
        path {Union[str, pathlib.Path]} -- Where to write the file.

        Keyword Arguments:
        ----
        section {str} -- The section name. (default: {'solver'})
        """

        parser = ConfigParser()
        parser.add_section(section)

        for key, value in dataclasses.asdict(self).items():
            parser.set(section, key, repr(value))

        with open(file=path, mode='w') as config_file:
            parser.write(config_file)
