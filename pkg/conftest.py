# Test collection wiring: the suite is written for Django's test runner,
# so configure Django before pytest imports the test modules.
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'convex_control.settings')
django.setup()
