"""Сегментация облаков точек городских сцен: аэро-ветка, точечная ветка и геометрическое слияние."""
