# Utils Package
# Shared helpers: errors, config files, checkpoints, run logs and artifact IO
