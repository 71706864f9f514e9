# Core module for iGraph: autodiff tape, factor graphs and the models built on them
