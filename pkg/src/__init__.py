# Financial QA Agent Framework
# Main source code package
