from .results_display import ResultsDisplay

__all__ = ['ResultsDisplay']
