# Metrics, evaluation, experiment runners and report tables
