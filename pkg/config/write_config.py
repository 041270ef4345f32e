# python 3.x
from demandforge.config import SolverConfig

# Writes the default solver settings; edit the file and pass it with --config.
config = SolverConfig()
config.to_ini(path='config/config.ini')
